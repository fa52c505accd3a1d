//! Finite-difference verification of every tape primitive, every loss and
//! the full scene-to-objective composition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{compare_with_central_differences, Tape, Tensor, Var};
use crate::io::{LabelArray, Point, PointCloud};
use crate::losses::{
    build_objective, center_loss, contrastive, lovasz_softmax, objectosphere, total_loss, weighted_ce,
    ClassMeanState, LossConfig, LossInputs,
};
use crate::network::{point_features, NetConfig, Network, Topology};
use crate::voxel::{voxel_labels, voxelize, CylGrid, KnownClasses};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub rows: Vec<CheckRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn worst(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for r in &self.rows {
            let verdict = if r.passed { "ok" } else { "FAIL" };
            writeln!(f, "{:<28} {:>12.3e}  {verdict}", r.name, r.max_rel_error)?;
        }
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{verdict}: {} checks, worst {:.3e}, tolerance {:.0e}", self.rows.len(), self.worst(), self.tolerance)
    }
}

struct Suite {
    rng: ChaCha8Rng,
    tolerance: f64,
    /// Perturbs every analytic gradient; used to prove the harness can fail.
    inject_fault: bool,
    rows: Vec<CheckRow>,
}

impl Suite {
    fn uniform(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
        Tensor::new(rows, cols, (0..rows * cols).map(|_| self.rng.random_range(lo..hi)).collect())
    }

    /// Entries with magnitude in `[0.2, 1]`, away from the ReLU kink.
    fn kink_free(&mut self, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| {
                let m = self.rng.random_range(0.2..1.0);
                if self.rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        Tensor::new(rows, cols, data)
    }

    fn record(&mut self, name: &str, f: impl Fn(&Tensor) -> f64, x: &Tensor, mut analytic: Vec<f64>) {
        if self.inject_fault {
            for g in &mut analytic {
                *g = *g * 1.01 + 1e-3;
            }
        }
        let r = compare_with_central_differences(f, x, &analytic, DEFAULT_STEP);
        self.rows.push(CheckRow {
            name: name.to_string(),
            max_rel_error: r.max_rel_error,
            passed: r.max_rel_error <= self.tolerance,
        });
    }

    /// Gradient of a sum-reduced tape function of one input.
    fn check(&mut self, name: &str, x: Tensor, f: impl Fn(&mut Tape, Var) -> Var) {
        let scalar = |t: &mut Tape, v: Var| {
            let out = f(t, v);
            t.sum(out)
        };
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let out = scalar(&mut tape, v);
        let analytic = tape.backward(out).get_or_zeros(&tape, v);
        let eval = |p: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.param(p.clone());
            let out = scalar(&mut tape, v);
            tape.scalar(out)
        };
        self.record(name, eval, &x, analytic);
    }

    fn primitives(&mut self) {
        let other = self.uniform(3, 4, -1.0, 1.0);
        let row = self.uniform(1, 4, -1.0, 1.0);
        let right = self.uniform(4, 5, -1.0, 1.0);
        // A fixed weighting keeps sum-reduced outputs informative.
        let weights = self.uniform(3, 4, 0.5, 1.5);
        let base = self.uniform(3, 4, -1.0, 1.0);
        let weigh = |t: &mut Tape, y: Var| {
            let w = t.constant(weights.clone());
            t.mul(y, w)
        };
        self.check("add", base.clone(), |t, x| {
            let o = t.constant(other.clone());
            let y = t.add(x, o);
            t.mul(y, y)
        });
        self.check("sub", base.clone(), |t, x| {
            let o = t.constant(other.clone());
            let y = t.sub(o, x);
            t.mul(y, y)
        });
        self.check("mul", base.clone(), |t, x| {
            let o = t.constant(other.clone());
            t.mul(x, o)
        });
        self.check("add_row", row.clone(), |t, x| {
            let m = t.constant(other.clone());
            let y = t.add_row(m, x);
            t.mul(y, y)
        });
        self.check("matmul", base.clone(), |t, x| {
            let r = t.constant(right.clone());
            let y = t.matmul(x, r);
            t.mul(y, y)
        });
        let relu_in = self.kink_free(3, 4);
        self.check("relu", relu_in, |t, x| {
            let y = t.relu(x);
            weigh(t, y)
        });
        self.check("exp", base.clone(), |t, x| t.exp(x));
        self.check("log", base.clone(), |t, x| {
            let e = t.exp(x);
            let s = t.scale(e, 2.0);
            let y = t.log(s);
            t.mul(y, y)
        });
        self.check("softmax", base.clone(), |t, x| {
            let y = t.softmax(x);
            weigh(t, y)
        });
        self.check("log_softmax", base.clone(), |t, x| {
            let y = t.log_softmax(x);
            weigh(t, y)
        });
        self.check("sq_norm_rows", base.clone(), |t, x| t.sq_norm_rows(x));
        self.check("normalize_rows", base.clone(), |t, x| {
            let y = t.normalize_rows(x);
            weigh(t, y)
        });
        self.check("max_rows", base.clone(), |t, x| {
            let (m, _) = t.max_rows(x);
            t.mul(m, m)
        });
        let seg_in = self.uniform(5, 3, -1.0, 1.0);
        self.check("segment_max", seg_in, |t, x| {
            let y = t.segment_max(x, &[vec![0, 2, 4], vec![1], vec![3, 1]]);
            t.mul(y, y)
        });
        self.check("gather_rows", base.clone(), |t, x| {
            let y = t.gather_rows(x, &[2, 0, 2, 1]);
            t.mul(y, y)
        });
        self.check("scatter_add_rows", base.clone(), |t, x| {
            let y = t.scatter_add_rows(x, &[1, 0, 1], 2);
            t.mul(y, y)
        });
        self.check("pick", base.clone(), |t, x| {
            let y = t.pick(x, &[3, 0, 1]);
            t.mul(y, y)
        });
        self.check("mean", base.clone(), |t, x| {
            let y = t.mul(x, x);
            t.mean(y)
        });
        self.check("scale", base, |t, x| {
            let y = t.scale(x, -2.5);
            t.mul(y, y)
        });
    }

    fn losses(&mut self) {
        let y = vec![Some(0), Some(2), None, Some(1), Some(0), Some(2)];
        let mask: Vec<bool> = y.iter().map(Option::is_some).collect();
        let mu = self.uniform(3, 3, -1.0, 1.0);
        let centers = self.uniform(3, 3, -1.0, 1.0);
        // Squared norms stay below eta = 4, away from the objectosphere hinge.
        let f = self.uniform(6, 3, -1.0, 1.0);
        let weights = [1.2, 0.7, 1.1];
        self.check("loss/ce", f.clone(), |t, x| weighted_ce(t, x, &y, &weights).value);
        self.check("loss/lovasz", f.clone(), |t, x| lovasz_softmax(t, x, &y).value);
        self.check("loss/objectosphere", f.clone(), |t, x| objectosphere(t, x, &mask, 4.0).value);
        self.check("loss/contrastive", f.clone(), |t, x| contrastive(t, x, &y, &mu, 0.1).value);
        self.check("loss/center", f.clone(), |t, x| center_loss(t, x, &y, &centers).value);
        self.check("loss/total", f, |t, x| {
            let terms = [
                Some(weighted_ce(t, x, &y, &weights).value),
                Some(lovasz_softmax(t, x, &y).value),
                Some(objectosphere(t, x, &mask, 4.0).value),
                Some(contrastive(t, x, &y, &mu, 0.1).value),
                Some(center_loss(t, x, &y, &centers).value),
            ];
            total_loss(t, &terms, &LossConfig::nuscenes())
        });
    }

    /// Parameter gradients of the full objective on a scene of at most 20
    /// points, for each topology.
    fn end_to_end(&mut self, seed: u64) {
        let (cloud, labels) = self.tiny_scene();
        let grid = CylGrid {
            rho: [0.0, 10.0],
            z: [-2.0, 2.0],
            bins: [4, 6, 2],
        };
        let known = KnownClasses::new(vec![10, 40, 50]).expect("distinct ids");
        let mapping = voxelize(&cloud, &grid);
        let feats = point_features(&cloud, &mapping);
        let vl = voxel_labels(&labels, &mapping, &known);
        let cfg = LossConfig {
            eta: 4.0,
            ..LossConfig::nuscenes()
        };
        let mut state = ClassMeanState::new(3, 3);
        state.update(&self.uniform(4, 3, -1.0, 1.0), &[Some(0), Some(1), Some(2), Some(0)]);
        state.end_epoch();
        for topology in [Topology::SingleHead, Topology::SharedDecoderDualHead, Topology::DualDecoder] {
            let net = Network::new(NetConfig {
                num_classes: 3,
                encoder_widths: vec![6, 5],
                decoder_widths: vec![5],
                topology,
                seed,
                ..NetConfig::default()
            })
            .expect("valid config");
            let objective = |net: &Network, trainable: bool| {
                let mut tape = Tape::new();
                let bound = net.bind(&mut tape, trainable);
                let x = tape.constant(feats.clone());
                let v = net.encode(&mut tape, &bound, x, &mapping);
                let out = net.forward(&mut tape, &bound, v);
                let inputs = LossInputs {
                    labels: &vl,
                    state: &state,
                    class_weights: &[1.0, 0.8, 1.3],
                    contrastive_active: true,
                };
                let (total, _) = build_objective(&mut tape, out.f_s, out.f_o, &inputs, &cfg);
                (tape, bound, total)
            };
            let (tape, bound, total) = objective(&net, true);
            let grads = tape.backward(total);
            let analytic: Vec<Vec<f64>> = bound.vars().map(|v| grads.get_or_zeros(&tape, v)).collect();
            let params: Vec<Tensor> = net.params().cloned().collect();
            for (i, (p, g)) in params.iter().zip(analytic).enumerate() {
                let eval = |x: &Tensor| {
                    let mut probe = net.clone();
                    *probe.params_mut().nth(i).expect("index in range") = x.clone();
                    let (tape, _, total) = objective(&probe, false);
                    tape.scalar(total)
                };
                let name = format!("end_to_end/{}/param{i}", topology_tag(topology));
                self.record(&name, eval, p, g);
            }
        }
    }

    fn tiny_scene(&mut self) -> (PointCloud, LabelArray) {
        let mut points = Vec::new();
        let mut labels = Vec::new();
        // Three clusters of known points and one unknown cluster, 18 points.
        let clusters = [(10u16, 3.0, 0.5), (40, 5.5, -1.5), (50, 7.5, 2.5), (20, 4.0, -2.8)];
        for (id, r, phi) in clusters {
            for _ in 0..4 {
                let rr = r + self.rng.random_range(-0.4..0.4);
                let pp: f64 = phi + self.rng.random_range(-0.2..0.2);
                let z = self.rng.random_range(-1.5..1.5);
                let i = self.rng.random_range(0.0..1.0);
                points.push(Point::new((rr * pp.cos()) as f32, (rr * pp.sin()) as f32, z as f32, i as f32));
                labels.push(id);
            }
        }
        points.push(Point::new(0.5, 0.5, 0.0, 0.3));
        labels.push(40);
        points.push(Point::new(30.0, 0.0, 0.0, 0.3));
        labels.push(10);
        (PointCloud::new(points), LabelArray::new(labels))
    }
}

fn topology_tag(t: Topology) -> &'static str {
    match t {
        Topology::SingleHead => "a",
        Topology::SharedDecoderDualHead => "b",
        Topology::DualDecoder => "c",
    }
}

/// Runs every check with inputs drawn from `seed`.
pub fn run(seed: u64, tolerance: f64, inject_fault: bool) -> GradcheckReport {
    let mut suite = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        tolerance,
        inject_fault,
        rows: Vec::new(),
    };
    suite.primitives();
    suite.losses();
    suite.end_to_end(seed);
    GradcheckReport {
        seed,
        tolerance,
        rows: suite.rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_across_seeds() {
        for seed in 0..3 {
            let r = run(seed, DEFAULT_TOLERANCE, false);
            assert!(r.passed(), "seed {seed}:\n{r}");
            assert!(r.rows.iter().any(|row| row.name.starts_with("end_to_end/c/")));
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        let r = run(0, DEFAULT_TOLERANCE, true);
        assert!(!r.passed());
        assert!(r.rows.iter().all(|row| !row.passed), "{r}");
    }
}
