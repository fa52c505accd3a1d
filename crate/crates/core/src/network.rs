//! Shared point encoder with voxel max pooling, followed by a closed-set
//! decoder and an open-set decoder.
//!
//! Three topologies are supported:
//!
//! * [`Topology::SingleHead`]: one decoder stack and one head; the closed-set
//!   logits double as open-set features.
//! * [`Topology::SharedDecoderDualHead`]: one decoder stack feeding two
//!   linear heads.
//! * [`Topology::DualDecoder`]: two independent decoder stacks.

use std::f64::consts::PI;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax_first, Tape, Tensor, Var};
use crate::io::PointCloud;
use crate::voxel::{to_cylindrical, VoxelMapping};
use crate::{Error, Result};

/// Width of the per-point input feature.
pub const POINT_FEATURE_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    SingleHead,
    SharedDecoderDualHead,
    DualDecoder,
}

impl Topology {
    pub fn code(self) -> u32 {
        match self {
            Topology::SingleHead => 0,
            Topology::SharedDecoderDualHead => 1,
            Topology::DualDecoder => 2,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Topology::SingleHead),
            1 => Ok(Topology::SharedDecoderDualHead),
            2 => Ok(Topology::DualDecoder),
            other => Err(Error::Config(format!("unknown topology code {other}"))),
        }
    }

    /// Accepts the snake_case names and the short ablation tags `a`/`b`/`c`.
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" | "single_head" => Ok(Topology::SingleHead),
            "b" | "shared_decoder_dual_head" => Ok(Topology::SharedDecoderDualHead),
            "c" | "dual_decoder" => Ok(Topology::DualDecoder),
            other => Err(Error::Config(format!("unknown topology {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Number of known classes; both heads emit this many values.
    pub num_classes: usize,
    pub input_dim: usize,
    /// Output widths of the per-point encoder layers.
    pub encoder_widths: Vec<usize>,
    /// Hidden widths of each decoder before its head.
    pub decoder_widths: Vec<usize>,
    pub topology: Topology,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            num_classes: 4,
            input_dim: POINT_FEATURE_DIM,
            encoder_widths: vec![32, 64],
            decoder_widths: vec![64],
            topology: Topology::DualDecoder,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "at least 2 known classes required, got {}",
                self.num_classes
            )));
        }
        if self.input_dim == 0 || self.encoder_widths.is_empty() {
            return Err(Error::Config("encoder needs an input and at least one layer".into()));
        }
        if self.encoder_widths.contains(&0) || self.decoder_widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    fn voxel_dim(&self) -> usize {
        *self.encoder_widths.last().expect("validated")
    }
}

/// Affine layer `x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, zero_bias: bool) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let weight = Tensor::new(fan_in, fan_out, draw(fan_in * fan_out));
        let bias = if zero_bias {
            Tensor::zeros(1, fan_out)
        } else {
            Tensor::new(1, fan_out, draw(fan_out))
        };
        Linear { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Which layers make up which part of the network.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    encoder: Range<usize>,
    sem_stack: Range<usize>,
    sem_head: usize,
    /// `None`: the open-set path reuses the closed-set stack.
    open_stack: Option<Range<usize>>,
    /// `None`: the open-set path reuses the closed-set head.
    open_head: Option<usize>,
    len: usize,
}

impl Layout {
    fn of(cfg: &NetConfig) -> Self {
        let e = cfg.encoder_widths.len();
        let d = cfg.decoder_widths.len();
        let encoder = 0..e;
        let sem_stack = e..e + d;
        let sem_head = e + d;
        match cfg.topology {
            Topology::SingleHead => Layout {
                encoder,
                sem_stack,
                sem_head,
                open_stack: None,
                open_head: None,
                len: e + d + 1,
            },
            Topology::SharedDecoderDualHead => Layout {
                encoder,
                sem_stack,
                sem_head,
                open_stack: None,
                open_head: Some(e + d + 1),
                len: e + d + 2,
            },
            Topology::DualDecoder => Layout {
                encoder,
                sem_stack,
                sem_head,
                open_stack: Some(e + d + 1..e + 2 * d + 1),
                open_head: Some(e + 2 * d + 1),
                len: e + 2 * d + 2,
            },
        }
    }

    /// `(in, out)` for every layer in storage order.
    fn dims(&self, cfg: &NetConfig) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.len);
        let mut prev = cfg.input_dim;
        for &w in &cfg.encoder_widths {
            dims.push((prev, w));
            prev = w;
        }
        let decoder = |dims: &mut Vec<(usize, usize)>| {
            let mut prev = cfg.voxel_dim();
            for &w in &cfg.decoder_widths {
                dims.push((prev, w));
                prev = w;
            }
            prev
        };
        let head_in = decoder(&mut dims);
        dims.push((head_in, cfg.num_classes));
        match cfg.topology {
            Topology::SingleHead => {}
            Topology::SharedDecoderDualHead => dims.push((head_in, cfg.num_classes)),
            Topology::DualDecoder => {
                let open_in = decoder(&mut dims);
                dims.push((open_in, cfg.num_classes));
            }
        }
        dims
    }

    fn is_head(&self, i: usize) -> bool {
        i == self.sem_head || Some(i) == self.open_head
    }
}

/// Parameters plus the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    cfg: NetConfig,
    layout: Layout,
    layers: Vec<Linear>,
}

/// Closed-set logits and open-set features, both `n_v x K_s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogitsPair {
    pub f_s: Var,
    pub f_o: Var,
}

/// Network parameters registered on a tape, two nodes per layer.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<(Var, Var)>,
}

impl Bound {
    /// Weight and bias nodes in storage order, matching [`Network::params`].
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().flat_map(|&(w, b)| [w, b])
    }
}

impl Network {
    /// Fan-in scaled uniform initialization; head biases start at zero.
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::of(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let layers = layout
            .dims(&cfg)
            .into_iter()
            .enumerate()
            .map(|(i, (fi, fo))| Linear::init(&mut rng, fi, fo, layout.is_head(i)))
            .collect();
        Ok(Network { cfg, layout, layers })
    }

    /// Builds a network from explicit layers, checking their shapes.
    pub fn from_layers(cfg: NetConfig, layers: Vec<Linear>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::of(&cfg);
        let dims = layout.dims(&cfg);
        if dims.len() != layers.len() {
            return Err(Error::Config(format!(
                "expected {} layers for this config, got {}",
                dims.len(),
                layers.len()
            )));
        }
        for (i, ((fi, fo), l)) in dims.iter().zip(&layers).enumerate() {
            if l.weight.shape() != [*fi, *fo] || l.bias.shape() != [1, *fo] {
                return Err(Error::Config(format!(
                    "layer {i}: expected weight [{fi}, {fo}] and bias [1, {fo}], got {:?} and {:?}",
                    l.weight.shape(),
                    l.bias.shape()
                )));
            }
        }
        Ok(Network { cfg, layout, layers })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    /// All parameter tensors in storage order (weight, bias, weight, ...).
    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn num_parameters(&self) -> usize {
        self.params().map(Tensor::len).sum()
    }

    /// Zeroes weights and biases of both heads.
    pub fn zero_heads(&mut self) {
        let heads = [Some(self.layout.sem_head), self.layout.open_head];
        for i in heads.into_iter().flatten() {
            let l = &mut self.layers[i];
            l.weight.data_mut().fill(0.0);
            l.bias.data_mut().fill(0.0);
        }
    }

    /// Copies the closed-set decoder into the open-set decoder. Only
    /// meaningful for [`Topology::DualDecoder`].
    pub fn mirror_decoders(&mut self) {
        if let (Some(open), Some(open_head)) = (self.layout.open_stack.clone(), self.layout.open_head) {
            for (s, o) in self.layout.sem_stack.clone().zip(open) {
                self.layers[o] = self.layers[s].clone();
            }
            self.layers[open_head] = self.layers[self.layout.sem_head].clone();
        }
    }

    /// Registers parameters on `tape`; `trainable` selects whether they
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.param(l.weight.clone()), tape.param(l.bias.clone()))
                } else {
                    (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
                }
            })
            .collect();
        Bound { vars }
    }

    fn linear(tape: &mut Tape, (w, b): (Var, Var), x: Var) -> Var {
        let h = tape.matmul(x, w);
        tape.add_row(h, b)
    }

    fn stack(&self, tape: &mut Tape, bound: &Bound, layers: Range<usize>, mut x: Var, relu_last: bool) -> Var {
        let last = layers.end.saturating_sub(1);
        for i in layers {
            x = Self::linear(tape, bound.vars[i], x);
            if i != last || relu_last {
                x = tape.relu(x);
            }
        }
        x
    }

    /// Per-point MLP followed by voxel max pooling; `point_feats` is
    /// `n_points x input_dim`. Returns `n_v x D` voxel features.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, point_feats: Var, mapping: &VoxelMapping) -> Var {
        let [n, d] = tape.shape(point_feats);
        assert_eq!(
            [n, d],
            [mapping.num_points(), self.cfg.input_dim],
            "encode: point features {:?} do not match {} points x {} inputs",
            [n, d],
            mapping.num_points(),
            self.cfg.input_dim
        );
        let h = self.stack(tape, bound, self.layout.encoder.clone(), point_feats, false);
        tape.segment_max(h, &mapping.members)
    }

    /// Both decoders on `n_v x D` voxel features.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, voxel_feats: Var) -> LogitsPair {
        let [_, d] = tape.shape(voxel_feats);
        assert_eq!(
            d,
            self.cfg.voxel_dim(),
            "forward: voxel features have width {d}, expected {}",
            self.cfg.voxel_dim()
        );
        let l = &self.layout;
        let sem_hidden = self.stack(tape, bound, l.sem_stack.clone(), voxel_feats, true);
        let f_s = Self::linear(tape, bound.vars[l.sem_head], sem_hidden);
        let f_o = match (&l.open_stack, l.open_head) {
            (None, None) => f_s,
            (None, Some(head)) => Self::linear(tape, bound.vars[head], sem_hidden),
            (Some(stack), Some(head)) => {
                let h = self.stack(tape, bound, stack.clone(), voxel_feats, true);
                Self::linear(tape, bound.vars[head], h)
            }
            (Some(_), None) => unreachable!("open stack without head"),
        };
        LogitsPair { f_s, f_o }
    }

    /// encode then forward, from raw points.
    pub fn run(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        cloud: &PointCloud,
        mapping: &VoxelMapping,
    ) -> LogitsPair {
        let x = tape.constant(point_features(cloud, mapping));
        let v = self.encode(tape, bound, x, mapping);
        self.forward(tape, bound, v)
    }

    /// Inference without gradient bookkeeping; returns `(f_s, f_o)` values.
    pub fn infer(&self, cloud: &PointCloud, mapping: &VoxelMapping) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = self.run(&mut tape, &bound, cloud, mapping);
        (tape.value(out.f_s).clone(), tape.value(out.f_o).clone())
    }
}

/// Per-point input: `(x, y, z, intensity, rho, phi, d_rho, d_z)` where the
/// deltas are offsets from the voxel center. Each component is scaled to
/// roughly unit range using the grid extents; points outside the grid get
/// zero offsets.
pub fn point_features(cloud: &PointCloud, mapping: &VoxelMapping) -> Tensor {
    let grid = &mapping.grid;
    let rho_max = grid.rho[1];
    let z_mid = 0.5 * (grid.z[0] + grid.z[1]);
    let z_half = 0.5 * (grid.z[1] - grid.z[0]);
    let [d_rho, _, d_z] = grid.bin_size();
    let mut data = Vec::with_capacity(cloud.len() * POINT_FEATURE_DIM);
    for (p, a) in cloud.points.iter().zip(&mapping.assignment) {
        let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
        let (rho, phi, _) = to_cylindrical(x, y, z);
        let (off_rho, off_z) = match a {
            Some(v) => {
                let c = grid.cell_center(grid.cell_bins(mapping.occupied[*v]));
                ((rho - c[0]) / (0.5 * d_rho), (z - c[2]) / (0.5 * d_z))
            }
            None => (0.0, 0.0),
        };
        data.extend_from_slice(&[
            x / rho_max,
            y / rho_max,
            (z - z_mid) / z_half,
            p.intensity as f64,
            rho / rho_max,
            phi / PI,
            off_rho,
            off_z,
        ]);
    }
    Tensor::new(cloud.len(), POINT_FEATURE_DIM, data)
}

/// Highest-valued class per row, lowest index on ties.
pub fn predict_closed(f_s: &Tensor) -> Vec<usize> {
    (0..f_s.rows()).map(|r| argmax_first(f_s.row_slice(r)).0).collect()
}
