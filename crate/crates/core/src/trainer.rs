//! Training loop, evaluation and the smaller workflows built on them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::checkpoint::Checkpoint;
use crate::io::{generate_scene, read_labeled_scan, ClassId, LabelArray, PointCloud, SceneConfig};
use crate::losses::{build_objective, inverse_sqrt_frequency, ClassMeanState, LossConfig, LossInputs};
use crate::metrics::{aupr, auroc, miou, BinaryScoredSet, ConfusionMatrix, EvalCounts, MetricsReport};
use crate::network::{point_features, NetConfig, Network};
use crate::openset::{max_logit, segment, OpenSetConfig, OssResult, UNKNOWN_CONFIDENCE};
use crate::voxel::{voxel_labels, voxelize, CylGrid, KnownClasses, VoxelLabels, VoxelMapping};
use crate::{Error, Result};

/// Scene index offset separating validation scenes from training scenes.
pub const VALIDATION_SCENE_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Scans per optimizer step.
    pub batch_size: usize,
    /// Seeds network initialization and the epoch shuffles.
    pub seed: u64,
    /// Synthetic scene counts, used when no directory is given.
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Directories of `<name>.bin` / `<name>.label` pairs.
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    /// Known class ids; defaults to the scene config's known ids.
    pub known_classes: Option<Vec<ClassId>>,
    /// Where `train` writes the final checkpoint, if anywhere.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 20,
            batch_size: 2,
            seed: 0,
            train_scenes: 200,
            val_scenes: 50,
            train_dir: None,
            val_dir: None,
            known_classes: None,
            checkpoint: None,
        }
    }
}

/// Full run configuration, one TOML table per section.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub train: TrainSection,
    pub scene: SceneConfig,
    pub grid: CylGrid,
    pub net: NetConfig,
    pub loss: LossConfig,
    pub openset: OpenSetConfig,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn known(&self) -> Result<KnownClasses> {
        let ids = match &self.train.known_classes {
            Some(ids) => ids.clone(),
            None => self.scene.known_class_ids(),
        };
        if ids.is_empty() {
            return Err(Error::Config("known class set is empty".into()));
        }
        KnownClasses::new(ids)
    }

    /// Network config with the class count and seed filled in from the
    /// known set and `train.seed`.
    pub fn net_config(&self) -> Result<NetConfig> {
        Ok(NetConfig {
            num_classes: self.known()?.len(),
            seed: self.train.seed,
            ..self.net.clone()
        })
    }

    /// Everything except the loss weights, which may all be zero.
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", t.lr)));
        }
        if t.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.eps > 0.0) {
            return Err(Error::Config("Adam needs 0 <= beta < 1 and eps > 0".into()));
        }
        let known = self.known()?;
        self.grid.validate()?;
        self.net_config()?.validate()?;
        self.loss.validate_params()?;
        self.openset.validate(&known)?;
        if t.train_dir.is_none() {
            self.scene.validate()?;
        }
        Ok(())
    }

    pub fn training_data(&self) -> Result<Dataset> {
        let known = self.known()?;
        match &self.train.train_dir {
            Some(dir) => Dataset::load_dir(dir, &self.grid, &known),
            None => Dataset::synthesize(&self.scene, 0, self.train.train_scenes, &self.grid, &known),
        }
    }

    pub fn validation_data(&self) -> Result<Dataset> {
        let known = self.known()?;
        match &self.train.val_dir {
            Some(dir) => Dataset::load_dir(dir, &self.grid, &known),
            None => Dataset::synthesize(
                &self.scene,
                VALIDATION_SCENE_OFFSET,
                self.train.val_scenes,
                &self.grid,
                &known,
            ),
        }
    }
}

/// One labeled scan with everything derived from it precomputed.
#[derive(Debug, Clone)]
pub struct Scan {
    pub name: String,
    pub cloud: PointCloud,
    pub labels: LabelArray,
    pub mapping: VoxelMapping,
    pub features: Tensor,
    pub voxel_labels: VoxelLabels,
}

impl Scan {
    pub fn prepare(
        name: impl Into<String>,
        cloud: PointCloud,
        labels: LabelArray,
        grid: &CylGrid,
        known: &KnownClasses,
    ) -> Result<Self> {
        labels.check_paired(&cloud)?;
        let mapping = voxelize(&cloud, grid);
        let features = point_features(&cloud, &mapping);
        let voxel_labels = voxel_labels(&labels, &mapping, known);
        Ok(Scan {
            name: name.into(),
            cloud,
            labels,
            mapping,
            features,
            voxel_labels,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub known: KnownClasses,
    pub scans: Vec<Scan>,
}

impl Dataset {
    /// Scenes `offset .. offset + count` of `scene`.
    pub fn synthesize(
        scene: &SceneConfig,
        offset: u64,
        count: usize,
        grid: &CylGrid,
        known: &KnownClasses,
    ) -> Result<Self> {
        let scans = (0..count as u64)
            .map(|i| {
                let (cloud, labels) = generate_scene(&scene.with_scene_index(offset + i))?;
                Scan::prepare(format!("{:06}", offset + i), cloud, labels, grid, known)
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            known: known.clone(),
            scans,
        })
    }

    /// Every `<name>.bin` with a sibling `<name>.label`, sorted by name.
    pub fn load_dir(dir: impl AsRef<Path>, grid: &CylGrid, known: &KnownClasses) -> Result<Self> {
        let dir = dir.as_ref();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut names = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().is_some_and(|e| e == "bin") {
                names.push(path);
            }
        }
        names.sort();
        if names.is_empty() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no .bin scans in directory"),
            ));
        }
        let scans = names
            .into_iter()
            .map(|bin| {
                let (cloud, labels) = read_labeled_scan(&bin, bin.with_extension("label"))?;
                let name = bin.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                Scan::prepare(name, cloud, labels, grid, known)
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            known: known.clone(),
            scans,
        })
    }

    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }

    /// Known voxels per class over the whole set.
    pub fn class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0; self.known.len()];
        for s in &self.scans {
            for c in s.voxel_labels.y_s.iter().flatten() {
                counts[*c] += 1;
            }
        }
        counts
    }
}

/// Bias-corrected Adam over a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, grads: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.into_iter().enumerate() {
            let g = &grads[i];
            assert_eq!(g.len(), p.len(), "Adam: gradient {i} has the wrong length");
            if self.m.len() <= i {
                self.m.push(vec![0.0; p.len()]);
                self.v.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Mean loss components over one epoch's steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub ce: f64,
    pub lovasz: f64,
    pub objectosphere: f64,
    pub contrastive: f64,
    pub center: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
    pub metrics: Option<MetricsReport>,
    pub wall_clock_secs: f64,
    pub config: TrainConfig,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: RunReport,
}

/// A run stopped by a non-finite loss, with the parameters from before the
/// failing step.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub last_good: Box<Checkpoint>,
    pub epochs: Vec<EpochLog>,
}

impl From<TrainAbort> for Error {
    fn from(a: TrainAbort) -> Self {
        a.error
    }
}

/// Trains a fresh network on `data`.
///
/// Each step runs the batch's scans through encode and forward on one tape,
/// averages their objectives, backpropagates, applies Adam, then folds the
/// step's open-set features into the class means. Means are frozen at every
/// epoch end; the contrastive term starts in epoch 1.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> std::result::Result<TrainOutcome, TrainAbort> {
    let started = Instant::now();
    let setup = || -> Result<(Network, KnownClasses, Vec<f64>)> {
        cfg.validate()?;
        let known = cfg.known()?;
        if known != data.known {
            return Err(Error::Config("dataset class set differs from the config".into()));
        }
        let net = Network::new(cfg.net_config()?)?;
        let weights = match &cfg.loss.class_weights {
            Some(w) if w.len() != known.len() => {
                return Err(Error::Config(format!(
                    "{} class weights for {} classes",
                    w.len(),
                    known.len()
                )))
            }
            Some(w) => w.clone(),
            None => inverse_sqrt_frequency(&data.class_counts()),
        };
        Ok((net, known, weights))
    };
    let fresh_state = |k: usize| ClassMeanState::new(k, k);
    let (mut net, known, weights) = match setup() {
        Ok(v) => v,
        Err(error) => {
            let net = Network::new(NetConfig::default()).expect("default config is valid");
            let known = KnownClasses::new(vec![0, 1, 2, 3]).expect("valid ids");
            return Err(TrainAbort {
                error,
                last_good: Box::new(Checkpoint::new(net, known, fresh_state(4)).expect("consistent")),
                epochs: Vec::new(),
            });
        }
    };
    let k = known.len();
    let mut state = fresh_state(k);
    let t = &cfg.train;
    let mut adam = Adam::new(t.lr, t.beta1, t.beta2, t.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed ^ 0x5eed_0f_0dd5);
    let mut logs = Vec::with_capacity(t.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..t.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 6];
        let mut steps = 0;
        for (step, batch) in order.chunks(t.batch_size).enumerate() {
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape, true);
            let mut total = None;
            let mut parts = [0.0; 5];
            let mut outputs = Vec::with_capacity(batch.len());
            for &i in batch {
                let scan = &data.scans[i];
                let x = tape.constant(scan.features.clone());
                let v = net.encode(&mut tape, &bound, x, &scan.mapping);
                let out = net.forward(&mut tape, &bound, v);
                let inputs = LossInputs {
                    labels: &scan.voxel_labels,
                    state: &state,
                    class_weights: &weights,
                    contrastive_active: epoch >= 1,
                };
                let (obj, vals) = build_objective(&mut tape, out.f_s, out.f_o, &inputs, &cfg.loss);
                for (p, v) in parts.iter_mut().zip(vals) {
                    *p += v / batch.len() as f64;
                }
                total = Some(match total {
                    Some(acc) => tape.add(acc, obj),
                    None => obj,
                });
                outputs.push((i, out.f_o));
            }
            let total = tape.scale(total.expect("batches are non-empty"), 1.0 / batch.len() as f64);
            let value = tape.scalar(total);
            let grads = tape.backward(total);
            let g: Vec<Vec<f64>> = bound.vars().map(|v| grads.get_or_zeros(&tape, v)).collect();
            let finite_grads = g.iter().flatten().all(|x| x.is_finite());
            if !value.is_finite() || parts.iter().any(|p| !p.is_finite()) || !finite_grads {
                let last_good = Checkpoint::new(net, known, state).expect("consistent");
                return Err(TrainAbort {
                    error: Error::NonFinite {
                        epoch,
                        step,
                        detail: format!("total {value}, components {parts:?}, finite gradients {finite_grads}"),
                    },
                    last_good: Box::new(last_good),
                    epochs: logs,
                });
            }
            adam.step(net.params_mut(), &g);
            for (i, f_o) in outputs {
                state.update(tape.value(f_o), &data.scans[i].voxel_labels.y_s);
            }
            for (s, v) in sums.iter_mut().zip(parts.iter().chain([&value])) {
                *s += v;
            }
            steps += 1;
        }
        state.end_epoch();
        let n = steps.max(1) as f64;
        logs.push(EpochLog {
            epoch,
            steps,
            ce: sums[0] / n,
            lovasz: sums[1] / n,
            objectosphere: sums[2] / n,
            contrastive: sums[3] / n,
            center: sums[4] / n,
            total: sums[5] / n,
        });
    }

    let checkpoint = Checkpoint::new(net, known, state).expect("consistent");
    let report = RunReport {
        seed: t.seed,
        epochs: logs,
        metrics: None,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        config: cfg.clone(),
    };
    Ok(TrainOutcome { checkpoint, report })
}

/// Metrics plus the per-scan predictions they were computed from.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub results: Vec<OssResult>,
}

/// Runs the checkpoint on every scan and scores the fused predictions.
pub fn evaluate(ck: &Checkpoint, data: &Dataset, cfg: &OpenSetConfig) -> Result<Evaluation> {
    if ck.known != data.known {
        return Err(Error::Config(format!(
            "checkpoint classes {:?} differ from data classes {:?}",
            ck.known.ids(),
            data.known.ids()
        )));
    }
    evaluate_outputs(|s| ck.net.infer(&s.cloud, &s.mapping), data, cfg)
}

/// [`evaluate`] with an arbitrary source of `(f_s, f_o)` per scan.
///
/// mIoU is point-wise over known classes, comparing the closed-set
/// prediction on points whose label is known. AUROC and AUPR rank the
/// anomaly score of every in-grid point, positives being points whose label
/// is not a known class. Points outside the grid are only counted.
pub fn evaluate_outputs(
    outputs: impl Fn(&Scan) -> (Tensor, Tensor),
    data: &Dataset,
    cfg: &OpenSetConfig,
) -> Result<Evaluation> {
    let known = &data.known;
    cfg.validate(known)?;
    let k = known.len();
    let mut cm = ConfusionMatrix::new(k);
    let mut scored = BinaryScoredSet::default();
    let mut counts = EvalCounts::default();
    let mut results = Vec::with_capacity(data.len());
    for scan in &data.scans {
        let (f_s, f_o) = outputs(scan);
        let res = segment(&f_s, &f_o, &scan.mapping, known, cfg);
        counts.scans += 1;
        for (p, (&gt, a)) in scan.labels.labels.iter().zip(&scan.mapping.assignment).enumerate() {
            counts.points += 1;
            let Some(v) = *a else {
                counts.outside_points += 1;
                continue;
            };
            if res.confidence[v] == UNKNOWN_CONFIDENCE {
                counts.flagged_points += 1;
            }
            match known.index_of(gt) {
                Some(t) => {
                    counts.known_points += 1;
                    let pred = known.index_of(res.closed[v]).expect("closed labels are known");
                    cm.add(t, pred);
                    scored.push(res.point_scores[p], false);
                }
                None => {
                    counts.unknown_points += 1;
                    scored.push(res.point_scores[p], true);
                }
            }
        }
        results.push(res);
    }
    let (per, mean) = miou(&cm, &(0..k).collect::<Vec<_>>());
    let report = MetricsReport {
        miou: mean,
        per_class_iou: per
            .into_iter()
            .enumerate()
            .map(|(i, v)| (known.id_of(i).to_string(), v))
            .collect(),
        aupr: aupr(&scored).ok(),
        auroc: auroc(&scored).ok(),
        counts,
    };
    Ok(Evaluation { report, results })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub xi: f64,
    /// Fraction of occupied voxels marked unknown.
    pub flagged_fraction: f64,
}

/// Fusion statistics over a range of thresholds. AUROC and AUPR rank the
/// continuous score and so do not depend on the threshold; they are
/// reported once by [`evaluate`].
pub fn sweep_threshold(ck: &Checkpoint, data: &Dataset, xis: &[f64]) -> Result<Vec<SweepRow>> {
    if xis.is_empty() {
        return Err(Error::Config("threshold range is empty".into()));
    }
    if let Some(bad) = xis.iter().find(|x| !x.is_finite()) {
        return Err(Error::Config(format!("threshold {bad} is not finite")));
    }
    let mut maxima = Vec::new();
    for scan in &data.scans {
        let (_, f_o) = ck.net.infer(&scan.cloud, &scan.mapping);
        maxima.extend((0..f_o.rows()).map(|r| max_logit(f_o.row_slice(r))));
    }
    Ok(xis
        .iter()
        .map(|&xi| {
            let flagged = maxima.iter().filter(|&&m| m <= xi).count();
            SweepRow {
                xi,
                flagged_fraction: if maxima.is_empty() {
                    0.0
                } else {
                    flagged as f64 / maxima.len() as f64
                },
            }
        })
        .collect())
}

/// `steps` evenly spaced values from `lo` to `hi` inclusive.
pub fn threshold_range(lo: f64, hi: f64, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 || !(lo <= hi) {
        return Err(Error::Config(format!("empty threshold range {lo}..{hi} ({steps} steps)")));
    }
    if steps == 1 {
        return Ok(vec![lo]);
    }
    Ok((0..steps).map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64).collect())
}

/// Creates `<root>/<UTC timestamp>-seed<seed>`, adding a numeric suffix if
/// that name is taken.
pub fn create_run_dir(root: impl AsRef<Path>, seed: u64) -> Result<PathBuf> {
    let root = root.as_ref();
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{stamp}-seed{seed}");
    for n in 0.. {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let dir = root.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(dir, e)),
        }
    }
    unreachable!("suffix search is unbounded")
}

/// Writes fused point labels and anomaly scores for one scan.
pub fn write_predictions(dir: impl AsRef<Path>, name: &str, res: &OssResult) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    crate::io::write_labels(&LabelArray::new(res.point_labels.clone()), dir.join(format!("{name}.label")))?;
    let scores: Vec<f32> = res.point_scores.iter().map(|&s| s as f32).collect();
    crate::io::write_scores(&scores, dir.join(format!("{name}.scores")))
}

/// Whitespace-separated table of open-set features, one row per occupied
/// voxel: `voxel_id f0 .. f{K-1} norm label known`.
pub fn feature_dump(ck: &Checkpoint, scan: &Scan) -> String {
    let (_, f_o) = ck.net.infer(&scan.cloud, &scan.mapping);
    let k = f_o.cols();
    let mut out = String::from("voxel_id");
    for c in 0..k {
        let _ = write!(out, " f{c}");
    }
    out.push_str(" norm label known\n");
    let vl = &scan.voxel_labels;
    for (v, id) in scan.mapping.occupied.iter().enumerate() {
        let row = f_o.row_slice(v);
        let _ = write!(out, "{id}");
        for x in row {
            let _ = write!(out, " {x:e}");
        }
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        let _ = writeln!(out, " {norm:e} {} {}", vl.majority[v], u8::from(vl.known_mask[v]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{ObjectRecipe, Point, Shape};

    fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.scene.ground_points = 60;
        cfg.scene.points_per_object = [15, 25];
        cfg.scene.known = vec![ObjectRecipe {
            class_id: 10,
            shape: Shape::Box,
            instances: 1,
            intensity: [0.3, 0.6],
        }];
        cfg.net.encoder_widths = vec![8, 8];
        cfg.net.decoder_widths = vec![8];
        cfg.train.train_scenes = 4;
        cfg.train.val_scenes = 2;
        cfg.train.epochs = 2;
        cfg
    }

    #[test]
    fn adam_first_three_steps_on_quadratic() {
        let mut x = Tensor::scalar(1.0);
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8);
        let expected = [0.9000000005, 0.8004122286917927, 0.70158627294603];
        for want in expected {
            let g = vec![2.0 * x.data()[0]];
            adam.step([&mut x], &[g]);
            assert!((x.data()[0] - want).abs() < 1e-12, "{} vs {want}", x.data()[0]);
        }
        assert_eq!(adam.steps(), 3);
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = tiny_config();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = TrainConfig::from_toml("[train]\nepochs = 3\n[loss]\neta = 2.0\n").unwrap();
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.loss.eta, 2.0);
        assert_eq!(partial.loss.tau, 0.1);
        assert!(TrainConfig::from_toml("[train]\nbogus = 1\n").is_err());
    }

    #[test]
    fn invalid_train_settings_rejected() {
        let mut cfg = tiny_config();
        cfg.train.lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.train.epochs = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.train.known_classes = Some(vec![]);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn net_config_follows_known_set() {
        let cfg = tiny_config();
        assert_eq!(cfg.net_config().unwrap().num_classes, 2);
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let cfg = tiny_config();
        let data = cfg.training_data().unwrap();
        let a = train(&cfg, &data).unwrap().checkpoint.to_bytes();
        let b = train(&cfg, &data).unwrap().checkpoint.to_bytes();
        assert_eq!(a, b);
        let mut other = cfg.clone();
        other.train.seed = 1;
        assert_ne!(train(&other, &data).unwrap().checkpoint.to_bytes(), a);
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let mut cfg = tiny_config();
        cfg.loss.lambda = [0.0; 5];
        let data = cfg.training_data().unwrap();
        let out = train(&cfg, &data).unwrap();
        let fresh = Network::new(cfg.net_config().unwrap()).unwrap();
        assert_eq!(out.checkpoint.net, fresh);
    }

    #[test]
    fn epoch_logs_and_contrastive_warmup() {
        let cfg = tiny_config();
        let data = cfg.training_data().unwrap();
        let out = train(&cfg, &data).unwrap();
        let logs = &out.report.epochs;
        assert_eq!(logs.len(), 2);
        assert_eq!(logs[0].contrastive, 0.0);
        assert!(logs[1].contrastive > 0.0);
        assert!(logs.iter().all(|l| l.total.is_finite() && l.steps == 2));
        assert!(out.checkpoint.state.mu_ready);
    }

    #[test]
    fn non_finite_input_aborts_with_last_good() {
        let cfg = tiny_config();
        let mut data = cfg.training_data().unwrap();
        let known = data.known.clone();
        let cloud = PointCloud::new(vec![Point::new(5.0, 0.0, -1.0, f32::MAX); 3]);
        let labels = LabelArray::new(vec![40; 3]);
        data.scans = vec![Scan::prepare("bad", cloud, labels, &cfg.grid, &known).unwrap()];
        data.scans[0].features.data_mut()[3] = f64::INFINITY;
        let abort = train(&cfg, &data).unwrap_err();
        assert!(matches!(abort.error, Error::NonFinite { epoch: 0, step: 0, .. }));
        assert_eq!(abort.last_good.net, Network::new(cfg.net_config().unwrap()).unwrap());
    }

    #[test]
    fn oracle_outputs_score_perfectly() {
        let cfg = tiny_config();
        let data = cfg.validation_data().unwrap();
        let k = data.known.len();
        let oracle = |s: &Scan| {
            let n = s.mapping.num_voxels();
            let mut f_s = Tensor::zeros(n, k);
            let mut f_o = Tensor::zeros(n, k);
            for (v, y) in s.voxel_labels.y_s.iter().enumerate() {
                if let Some(c) = y {
                    f_s.data_mut()[v * k + c] = 1.0;
                    f_o.data_mut()[v * k + c] = 1.0;
                }
            }
            (f_s, f_o)
        };
        let os = OpenSetConfig {
            xi: 0.5,
            ..OpenSetConfig::default()
        };
        let ev = evaluate_outputs(oracle, &data, &os).unwrap();
        let r = &ev.report;
        assert!(r.counts.unknown_points > 0);
        assert_eq!(r.miou, Some(1.0));
        assert_eq!(r.auroc, Some(1.0));
        assert_eq!(r.aupr, Some(1.0));
    }

    #[test]
    fn evaluate_rejects_foreign_class_set() {
        let cfg = tiny_config();
        let data = cfg.validation_data().unwrap();
        let net = Network::new(NetConfig {
            num_classes: 3,
            ..cfg.net_config().unwrap()
        })
        .unwrap();
        let ck = Checkpoint::new(net, KnownClasses::new(vec![10, 40, 50]).unwrap(), ClassMeanState::new(3, 3))
            .unwrap();
        assert!(matches!(evaluate(&ck, &data, &cfg.openset), Err(Error::Config(_))));
    }

    #[test]
    fn sweep_extremes_and_monotonicity() {
        let cfg = tiny_config();
        let data = cfg.validation_data().unwrap();
        let net = Network::new(cfg.net_config().unwrap()).unwrap();
        let ck = Checkpoint::new(net, data.known.clone(), ClassMeanState::new(2, 2)).unwrap();
        let rows = sweep_threshold(&ck, &data, &threshold_range(-50.0, 50.0, 41).unwrap()).unwrap();
        assert_eq!(rows.first().unwrap().flagged_fraction, 0.0);
        assert_eq!(rows.last().unwrap().flagged_fraction, 1.0);
        assert!(rows.windows(2).all(|w| w[0].flagged_fraction <= w[1].flagged_fraction));
        assert!(sweep_threshold(&ck, &data, &[]).is_err());
        assert!(threshold_range(1.0, 0.0, 3).is_err());
    }

    #[test]
    fn feature_dump_rows_and_norms() {
        let cfg = tiny_config();
        let data = cfg.validation_data().unwrap();
        let net = Network::new(cfg.net_config().unwrap()).unwrap();
        let ck = Checkpoint::new(net, data.known.clone(), ClassMeanState::new(2, 2)).unwrap();
        let scan = &data.scans[0];
        let text = feature_dump(&ck, scan);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "voxel_id f0 f1 norm label known");
        assert_eq!(lines.len(), scan.mapping.num_voxels() + 1);
        let (_, f_o) = ck.net.infer(&scan.cloud, &scan.mapping);
        let mut unknown_rows = 0;
        for (v, line) in lines[1..].iter().enumerate() {
            let cols: Vec<&str> = line.split_whitespace().collect();
            let norm: f64 = cols[3].parse().unwrap();
            let direct = f_o.row_slice(v).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - direct).abs() <= 1e-9);
            if cols[5] == "0" {
                unknown_rows += 1;
                assert!(!data.known.contains(cols[4].parse().unwrap()));
            }
        }
        assert!(unknown_rows > 0);
    }
}
