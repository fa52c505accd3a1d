//! Training objectives.
//!
//! Closed-set logits are supervised by weighted cross-entropy and the
//! Lovász-softmax surrogate of the Jaccard index. Open-set features are
//! shaped by three terms: the objectosphere loss pulls known voxels onto a
//! hypersphere of squared radius `eta` and unknown voxels to the origin,
//! a contrastive term aligns per-frame class means with the means frozen at
//! the end of the previous epoch, and a center loss tightens each class
//! around its running mean.
//!
//! All loss builders record onto a [`Tape`] and return a `1 x 1` node.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::voxel::VoxelLabels;
use crate::{Error, Result};

/// On/off switches for each loss term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossTerms {
    pub ce: bool,
    pub lovasz: bool,
    pub objectosphere: bool,
    pub contrastive: bool,
    pub center: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        LossTerms {
            ce: true,
            lovasz: true,
            objectosphere: true,
            contrastive: true,
            center: true,
        }
    }
}

impl LossTerms {
    pub fn as_array(&self) -> [bool; 5] {
        [self.ce, self.lovasz, self.objectosphere, self.contrastive, self.center]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weights of CE, Lovász, objectosphere, contrastive and center terms.
    pub lambda: [f64; 5],
    /// Target squared feature norm for known voxels.
    pub eta: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Per-class CE weights; `None` derives them from training-set
    /// frequencies.
    pub class_weights: Option<Vec<f64>>,
    pub enabled: LossTerms,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::nuscenes()
    }
}

impl LossConfig {
    /// Weights used for nuScenes.
    pub fn nuscenes() -> Self {
        LossConfig {
            lambda: [1.0, 1.0, 0.5, 0.5, 0.3],
            eta: 1.0,
            tau: 0.1,
            class_weights: None,
            enabled: LossTerms::default(),
        }
    }

    /// Weights used for SemanticKITTI.
    pub fn semantic_kitti() -> Self {
        LossConfig {
            lambda: [1.0, 1.0, 0.9, 0.5, 0.3],
            eta: 2.0,
            ..LossConfig::nuscenes()
        }
    }

    /// Checks `tau > 0`, `eta > 0`, non-negative weights, and at least one
    /// positive weight.
    pub fn validate(&self) -> Result<()> {
        self.validate_params()?;
        if !self.lambda.iter().any(|&l| l > 0.0) {
            return Err(Error::Config("at least one loss weight must be > 0".into()));
        }
        Ok(())
    }

    /// [`validate`](Self::validate) without the positive-weight requirement.
    pub fn validate_params(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        if self.lambda.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Config(format!("loss weights must be >= 0, got {:?}", self.lambda)));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::Config("class weights must be finite and >= 0".into()));
            }
        }
        Ok(())
    }

    /// Effective weight per term: `lambda` where enabled, else zero.
    pub fn effective_lambda(&self) -> [f64; 5] {
        let on = self.enabled.as_array();
        std::array::from_fn(|i| if on[i] { self.lambda[i] } else { 0.0 })
    }
}

/// A scalar loss node plus whether the batch had nothing to supervise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Loss {
    pub value: Var,
    pub degenerate: bool,
}

fn zero(tape: &mut Tape) -> Loss {
    Loss {
        value: tape.constant(Tensor::scalar(0.0)),
        degenerate: true,
    }
}

/// Indices and class ids of voxels with a known label.
fn supervised(y_s: &[Option<usize>]) -> (Vec<usize>, Vec<usize>) {
    y_s.iter()
        .enumerate()
        .filter_map(|(v, y)| y.map(|c| (v, c)))
        .unzip()
}

/// Weighted cross-entropy over non-ignored voxels, normalized by the sum of
/// the applied weights.
pub fn weighted_ce(tape: &mut Tape, f_s: Var, y_s: &[Option<usize>], class_weights: &[f64]) -> Loss {
    let [n, k] = tape.shape(f_s);
    assert_eq!(y_s.len(), n, "weighted_ce: {} labels for logits {:?}", y_s.len(), [n, k]);
    assert_eq!(class_weights.len(), k, "weighted_ce: {} class weights for {k} classes", class_weights.len());
    let (idx, cls) = supervised(y_s);
    let w: Vec<f64> = cls.iter().map(|&c| class_weights[c]).collect();
    let w_sum: f64 = w.iter().sum();
    if idx.is_empty() || w_sum <= 0.0 {
        return zero(tape);
    }
    let rows = tape.gather_rows(f_s, &idx);
    let ls = tape.log_softmax(rows);
    let picked = tape.pick(ls, &cls);
    let wv = tape.constant(Tensor::column(w));
    let weighted = tape.mul(picked, wv);
    let s = tape.sum(weighted);
    Loss {
        value: tape.scale(s, -1.0 / w_sum),
        degenerate: false,
    }
}

/// Gradient of the Lovász extension of the Jaccard loss with respect to
/// errors sorted in decreasing order; `gt_sorted` holds 0/1 foreground flags
/// in that order.
pub fn lovasz_grad(gt_sorted: &[f64]) -> Vec<f64> {
    let gts: f64 = gt_sorted.iter().sum();
    let mut cum_fg = 0.0;
    let mut cum_bg = 0.0;
    let mut jaccard = Vec::with_capacity(gt_sorted.len());
    for &g in gt_sorted {
        cum_fg += g;
        cum_bg += 1.0 - g;
        let inter = gts - cum_fg;
        let union = gts + cum_bg;
        jaccard.push(1.0 - inter / union);
    }
    for i in (1..jaccard.len()).rev() {
        jaccard[i] -= jaccard[i - 1];
    }
    jaccard
}

/// Lovász-softmax averaged over the classes present in the labels.
pub fn lovasz_softmax(tape: &mut Tape, f_s: Var, y_s: &[Option<usize>]) -> Loss {
    let [n, k] = tape.shape(f_s);
    assert_eq!(y_s.len(), n, "lovasz_softmax: {} labels for logits {:?}", y_s.len(), [n, k]);
    let (idx, cls) = supervised(y_s);
    if idx.is_empty() {
        return zero(tape);
    }
    let rows = tape.gather_rows(f_s, &idx);
    let probs = tape.softmax(rows);
    lovasz_on_probs(tape, probs, &cls)
}

/// Lovász-softmax on an `m x K` probability node with every row labeled.
pub fn lovasz_on_probs(tape: &mut Tape, probs: Var, cls: &[usize]) -> Loss {
    let [m, k] = tape.shape(probs);
    assert_eq!(cls.len(), m, "lovasz: {} labels for probabilities {:?}", cls.len(), [m, k]);
    let mut present = vec![false; k];
    for &c in cls {
        present[c] = true;
    }
    let mut per_class = Vec::new();
    for c in (0..k).filter(|&c| present[c]) {
        let fg: Vec<f64> = cls.iter().map(|&y| if y == c { 1.0 } else { 0.0 }).collect();
        let p = tape.pick(probs, &vec![c; m]);
        let errors: Vec<f64> = tape
            .value(p)
            .data()
            .iter()
            .zip(&fg)
            .map(|(p, g)| (g - p).abs())
            .collect();
        // Stable sort, so equal errors keep index order.
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));
        let grad = lovasz_grad(&order.iter().map(|&i| fg[i]).collect::<Vec<_>>());
        let mut weight = vec![0.0; m];
        for (rank, &i) in order.iter().enumerate() {
            weight[i] = grad[rank];
        }
        // |fg - p| = fg + (1 - 2 fg) p for fg in {0, 1}
        let sign = tape.constant(Tensor::column(fg.iter().map(|g| 1.0 - 2.0 * g).collect()));
        let fg = tape.constant(Tensor::column(fg));
        let sp = tape.mul(p, sign);
        let e = tape.add(sp, fg);
        let w = tape.constant(Tensor::column(weight));
        let we = tape.mul(e, w);
        per_class.push(tape.sum(we));
    }
    let count = per_class.len() as f64;
    let mut total = per_class[0];
    for &v in &per_class[1..] {
        total = tape.add(total, v);
    }
    Loss {
        value: tape.scale(total, 1.0 / count),
        degenerate: false,
    }
}

/// Mean over voxels of `max(eta - |f|^2, 0)` for known voxels and `|f|^2`
/// otherwise.
pub fn objectosphere(tape: &mut Tape, f_o: Var, known_mask: &[bool], eta: f64) -> Loss {
    let [n, k] = tape.shape(f_o);
    assert_eq!(known_mask.len(), n, "objectosphere: {} mask entries for {:?}", known_mask.len(), [n, k]);
    if n == 0 {
        return zero(tape);
    }
    let sq = tape.sq_norm_rows(f_o);
    let eta_v = tape.constant(Tensor::full(n, 1, eta));
    let gap = tape.sub(eta_v, sq);
    let hinge = tape.relu(gap);
    let known = tape.constant(Tensor::column(known_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()));
    let other = tape.constant(Tensor::column(known_mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect()));
    let a = tape.mul(known, hinge);
    let b = tape.mul(other, sq);
    let per_voxel = tape.add(a, b);
    Loss {
        value: tape.mean(per_voxel),
        degenerate: false,
    }
}

/// Contrastive alignment of L2-normalized per-frame class means with the
/// normalized means frozen at the previous epoch boundary (`mu_bar`,
/// `K x D`). Classes absent from the frame are skipped.
pub fn contrastive(tape: &mut Tape, f_o: Var, y_s: &[Option<usize>], mu_bar: &Tensor, tau: f64) -> Loss {
    let [n, d] = tape.shape(f_o);
    let k = mu_bar.rows();
    assert_eq!(y_s.len(), n, "contrastive: {} labels for features {:?}", y_s.len(), [n, d]);
    assert_eq!(mu_bar.cols(), d, "contrastive: means {:?} vs features {:?}", mu_bar.shape(), [n, d]);
    let (idx, cls) = supervised(y_s);
    if idx.is_empty() {
        return zero(tape);
    }
    let rows = tape.gather_rows(f_o, &idx);
    let sums = tape.scatter_add_rows(rows, &cls, k);
    let mut present = vec![false; k];
    for &c in &cls {
        present[c] = true;
    }
    let present: Vec<usize> = (0..k).filter(|&c| present[c]).collect();
    // Row normalization makes the 1/count factor of the mean irrelevant.
    let class_sums = tape.gather_rows(sums, &present);
    let frame_means = tape.normalize_rows(class_sums);
    let mu_t = tape.constant(transpose(&normalized_rows(mu_bar)));
    let dots = tape.matmul(frame_means, mu_t);
    let logits = tape.scale(dots, 1.0 / tau);
    let ls = tape.log_softmax(logits);
    let own = tape.pick(ls, &present);
    let s = tape.sum(own);
    Loss {
        value: tape.scale(s, -1.0),
        degenerate: false,
    }
}

/// Squared distance of each known voxel feature to its class center,
/// averaged over known voxels. Centers are constants.
pub fn center_loss(tape: &mut Tape, f_o: Var, y_s: &[Option<usize>], centers: &Tensor) -> Loss {
    let [n, d] = tape.shape(f_o);
    assert_eq!(y_s.len(), n, "center_loss: {} labels for features {:?}", y_s.len(), [n, d]);
    assert_eq!(centers.cols(), d, "center_loss: centers {:?} vs features {:?}", centers.shape(), [n, d]);
    let (idx, cls) = supervised(y_s);
    if idx.is_empty() {
        return zero(tape);
    }
    let rows = tape.gather_rows(f_o, &idx);
    let mut target = Vec::with_capacity(idx.len() * d);
    for &c in &cls {
        target.extend_from_slice(centers.row_slice(c));
    }
    let target = tape.constant(Tensor::new(idx.len(), d, target));
    let diff = tape.sub(rows, target);
    let sq = tape.sq_norm_rows(diff);
    let s = tape.sum(sq);
    Loss {
        value: tape.scale(s, 1.0 / idx.len() as f64),
        degenerate: false,
    }
}

/// Per-class mean bookkeeping for the contrastive and center terms.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeanState {
    /// Normalized class means frozen at the last epoch boundary, `K x D`.
    pub mu_bar: Tensor,
    /// Whether any epoch boundary has populated `mu_bar`.
    pub mu_ready: bool,
    pub epoch_sum: Tensor,
    pub epoch_count: Vec<u64>,
    /// Running means over every voxel seen so far, `K x D`.
    pub center: Tensor,
    pub center_count: Vec<u64>,
}

impl ClassMeanState {
    pub fn new(num_classes: usize, dim: usize) -> Self {
        ClassMeanState {
            mu_bar: Tensor::zeros(num_classes, dim),
            mu_ready: false,
            epoch_sum: Tensor::zeros(num_classes, dim),
            epoch_count: vec![0; num_classes],
            center: Tensor::zeros(num_classes, dim),
            center_count: vec![0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.mu_bar.rows()
    }

    pub fn dim(&self) -> usize {
        self.mu_bar.cols()
    }

    /// Folds one batch of open-set features into the epoch accumulators and
    /// the running centers.
    pub fn update(&mut self, f_o: &Tensor, y_s: &[Option<usize>]) {
        let (k, d) = (self.num_classes(), self.dim());
        assert_eq!(f_o.cols(), d, "update_means: feature width {} vs {d}", f_o.cols());
        assert_eq!(y_s.len(), f_o.rows(), "update_means: labels do not match features");
        let mut sum = vec![0.0; k * d];
        let mut count = vec![0u64; k];
        for (r, y) in y_s.iter().enumerate() {
            if let Some(c) = *y {
                count[c] += 1;
                for (s, v) in sum[c * d..(c + 1) * d].iter_mut().zip(f_o.row_slice(r)) {
                    *s += v;
                }
            }
        }
        for c in 0..k {
            let nb = count[c];
            if nb == 0 {
                continue;
            }
            let batch = &sum[c * d..(c + 1) * d];
            for (acc, b) in self.epoch_sum.data_mut()[c * d..(c + 1) * d].iter_mut().zip(batch) {
                *acc += b;
            }
            self.epoch_count[c] += nb;
            let prev = self.center_count[c] as f64;
            let total = prev + nb as f64;
            for (m, b) in self.center.data_mut()[c * d..(c + 1) * d].iter_mut().zip(batch) {
                *m = (prev * *m + b) / total;
            }
            self.center_count[c] += nb;
        }
    }

    /// Freezes the epoch means into `mu_bar` (normalized) and resets the
    /// accumulators. Classes unseen this epoch keep their previous mean.
    pub fn end_epoch(&mut self) {
        let d = self.dim();
        for c in 0..self.num_classes() {
            let n = self.epoch_count[c];
            if n == 0 {
                continue;
            }
            let mean: Vec<f64> = self.epoch_sum.row_slice(c).iter().map(|s| s / n as f64).collect();
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            let row = &mut self.mu_bar.data_mut()[c * d..(c + 1) * d];
            for (m, v) in row.iter_mut().zip(&mean) {
                *m = if norm > 0.0 { v / norm } else { 0.0 };
            }
            self.mu_ready = true;
        }
        self.epoch_sum.data_mut().fill(0.0);
        self.epoch_count.fill(0);
    }

    /// Centers for a batch: running means, or the batch mean for classes
    /// never encountered before.
    pub fn centers_for(&self, f_o: &Tensor, y_s: &[Option<usize>]) -> Tensor {
        let d = self.dim();
        let mut centers = self.center.clone();
        for c in 0..self.num_classes() {
            if self.center_count[c] > 0 {
                continue;
            }
            let rows: Vec<usize> = (0..y_s.len()).filter(|&r| y_s[r] == Some(c)).collect();
            if rows.is_empty() {
                continue;
            }
            let row = &mut centers.data_mut()[c * d..(c + 1) * d];
            row.fill(0.0);
            for &r in &rows {
                for (m, v) in row.iter_mut().zip(f_o.row_slice(r)) {
                    *m += v / rows.len() as f64;
                }
            }
        }
        centers
    }

    pub fn is_finite(&self) -> bool {
        [&self.mu_bar, &self.epoch_sum, &self.center]
            .iter()
            .all(|t| t.data().iter().all(|v| v.is_finite()))
    }
}

/// Loss term values of one step, in `lambda` order.
pub type LossBreakdown = [f64; 5];

/// `sum_i lambda_i * L_i` over enabled terms.
pub fn combine(values: &LossBreakdown, cfg: &LossConfig) -> f64 {
    values.iter().zip(cfg.effective_lambda()).map(|(v, l)| v * l).sum()
}

/// Weighted sum of the available term nodes; `None` terms contribute zero.
pub fn total_loss(tape: &mut Tape, terms: &[Option<Var>; 5], cfg: &LossConfig) -> Var {
    let lambda = cfg.effective_lambda();
    let mut total: Option<Var> = None;
    for (term, l) in terms.iter().zip(lambda) {
        let Some(v) = term else { continue };
        if l == 0.0 {
            continue;
        }
        let scaled = tape.scale(*v, l);
        total = Some(match total {
            Some(t) => tape.add(t, scaled),
            None => scaled,
        });
    }
    total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)))
}

/// Everything the per-scan objective needs besides the network outputs.
pub struct LossInputs<'a> {
    pub labels: &'a VoxelLabels,
    pub state: &'a ClassMeanState,
    pub class_weights: &'a [f64],
    /// The contrastive term is skipped until `mu_bar` exists.
    pub contrastive_active: bool,
}

/// Builds every enabled term with a non-zero weight and their weighted sum.
/// Returns the total node and the raw term values (zero when skipped).
pub fn build_objective(
    tape: &mut Tape,
    f_s: Var,
    f_o: Var,
    inputs: &LossInputs<'_>,
    cfg: &LossConfig,
) -> (Var, LossBreakdown) {
    let lambda = cfg.effective_lambda();
    let y = &inputs.labels.y_s;
    let mut terms: [Option<Var>; 5] = [None; 5];
    if lambda[0] > 0.0 {
        terms[0] = Some(weighted_ce(tape, f_s, y, inputs.class_weights).value);
    }
    if lambda[1] > 0.0 {
        terms[1] = Some(lovasz_softmax(tape, f_s, y).value);
    }
    if lambda[2] > 0.0 {
        terms[2] = Some(objectosphere(tape, f_o, &inputs.labels.known_mask, cfg.eta).value);
    }
    if lambda[3] > 0.0 && inputs.contrastive_active && inputs.state.mu_ready {
        terms[3] = Some(contrastive(tape, f_o, y, &inputs.state.mu_bar, cfg.tau).value);
    }
    if lambda[4] > 0.0 {
        let centers = inputs.state.centers_for(tape.value(f_o), y);
        terms[4] = Some(center_loss(tape, f_o, y, &centers).value);
    }
    let total = total_loss(tape, &terms, cfg);
    let values = terms.map(|t| t.map_or(0.0, |v| tape.scalar(v)));
    (total, values)
}

/// Inverse square-root class frequency, rescaled to mean 1 over classes
/// that occur. Classes with no samples get weight 1.
pub fn inverse_sqrt_frequency(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return vec![1.0; counts.len()];
    }
    let raw: Vec<Option<f64>> = counts
        .iter()
        .map(|&n| (n > 0).then(|| 1.0 / (n as f64 / total as f64).sqrt()))
        .collect();
    let seen: Vec<f64> = raw.iter().flatten().copied().collect();
    let mean = seen.iter().sum::<f64>() / seen.len() as f64;
    raw.iter().map(|w| w.map_or(1.0, |w| w / mean)).collect()
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.get(i, j);
        }
    }
    Tensor::new(c, r, out)
}

fn normalized_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let c = t.cols().max(1);
    for row in out.data_mut().chunks_exact_mut(c) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eval(f: impl FnOnce(&mut Tape) -> Loss) -> (f64, bool) {
        let mut tape = Tape::new();
        let l = f(&mut tape);
        (tape.scalar(l.value), l.degenerate)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn ce_uniform_logits() {
        let (v, d) = eval(|t| {
            let f = t.param(Tensor::row(vec![0.0, 0.0]));
            weighted_ce(t, f, &[Some(0)], &[1.0, 1.0])
        });
        assert!((v - 0.5f64.ln().abs()).abs() < 1e-12);
        assert!(!d);
    }

    #[test]
    fn ce_ignored_only_is_degenerate() {
        let (v, d) = eval(|t| {
            let f = t.param(Tensor::row(vec![3.0, -1.0]));
            weighted_ce(t, f, &[None], &[1.0, 1.0])
        });
        assert_eq!(v, 0.0);
        assert!(d);
    }

    #[test]
    fn ce_confident_logits() {
        // -log softmax([10, -10])_0 = log(1 + e^-20)
        let expected = (-20.0f64).exp().ln_1p();
        let (v, _) = eval(|t| {
            let f = t.param(Tensor::row(vec![10.0, -10.0]));
            weighted_ce(t, f, &[Some(0)], &[1.0, 1.0])
        });
        assert!((v - expected).abs() < 1e-22);
        assert!((v - 2.0611536e-9).abs() < 1e-15);
    }

    #[test]
    fn ce_weights_normalize_by_applied_sum() {
        let logits = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![5.0, 5.0]]);
        let nll = |row: [f64; 2], y: usize| -> f64 {
            let lse = (row[0].exp() + row[1].exp()).ln();
            lse - row[y]
        };
        let (a, b) = (nll([1.0, 0.0], 0), nll([0.0, 2.0], 1));
        let (v, _) = eval(|t| {
            let f = t.param(logits.clone());
            weighted_ce(t, f, &[Some(0), Some(1), None], &[3.0, 1.0])
        });
        assert!((v - (3.0 * a + b) / 4.0).abs() < 1e-12);
    }

    fn lovasz_probs(probs: &Tensor, cls: &[usize]) -> f64 {
        let mut t = Tape::new();
        let p = t.param(probs.clone());
        let l = lovasz_on_probs(&mut t, p, cls);
        t.scalar(l.value)
    }

    #[test]
    fn lovasz_perfect_prediction_is_zero() {
        let probs = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]]);
        assert_eq!(lovasz_probs(&probs, &[0, 2, 1]), 0.0);
    }

    #[test]
    fn lovasz_single_voxel_is_one_minus_p() {
        for p in [0.1, 0.5, 0.93] {
            let probs = Tensor::row(vec![p, 1.0 - p]);
            assert!((lovasz_probs(&probs, &[0]) - (1.0 - p)).abs() < 1e-15);
        }
    }

    #[test]
    fn lovasz_ignored_only_is_degenerate() {
        let (v, d) = eval(|t| {
            let f = t.param(Tensor::row(vec![0.3, 0.1]));
            lovasz_softmax(t, f, &[None])
        });
        assert_eq!(v, 0.0);
        assert!(d);
    }

    #[test]
    fn objectosphere_values() {
        let known = |sq: f64, k: bool| {
            eval(|t| {
                let f = t.param(Tensor::row(vec![sq.sqrt(), 0.0]));
                objectosphere(t, f, &[k], 1.0)
            })
            .0
        };
        assert!((known(0.25, true) - 0.75).abs() < 1e-15);
        assert_eq!(known(1.5, true), 0.0);
        assert!((known(0.25, false) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn contrastive_single_class_is_zero() {
        let (v, _) = eval(|t| {
            let f = t.param(Tensor::from_rows(&[vec![0.3], vec![2.0]]));
            contrastive(t, f, &[Some(0), Some(0)], &Tensor::row(vec![1.0]), 0.1)
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn contrastive_orthonormal_means() {
        let e = std::f64::consts::E;
        let expected = 2.0 * -(e / (e + 1.0)).ln();
        let (v, _) = eval(|t| {
            let f = t.param(Tensor::identity(2));
            contrastive(t, f, &[Some(0), Some(1)], &Tensor::identity(2), 1.0)
        });
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.626523).abs() < 1e-6);
    }

    #[test]
    fn contrastive_misaligned_means() {
        // Each frame mean points at the other class: logits [0, 1/tau] per class.
        let tau = 0.1;
        let per_class = (1.0 + (1.0f64 / tau).exp()).ln();
        let f = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let (v, _) = eval(|t| {
            let f = t.param(f.clone());
            contrastive(t, f, &[Some(0), Some(1)], &Tensor::identity(2), tau)
        });
        assert!((v - 2.0 * per_class).abs() < 1e-9);
        assert!((per_class - 10.0).abs() < 1e-4);
    }

    #[test]
    fn contrastive_without_known_voxels_is_degenerate() {
        let (v, d) = eval(|t| {
            let f = t.param(Tensor::identity(2));
            contrastive(t, f, &[None, None], &Tensor::identity(2), 0.1)
        });
        assert_eq!(v, 0.0);
        assert!(d);
    }

    #[test]
    fn center_loss_values() {
        let run = |rows: &[Vec<f64>], c: Vec<f64>| {
            eval(|t| {
                let f = t.param(Tensor::from_rows(rows));
                let y = vec![Some(0); rows.len()];
                center_loss(t, f, &y, &Tensor::row(c))
            })
            .0
        };
        assert_eq!(run(&[vec![0.5, 0.5], vec![0.5, 0.5]], vec![0.5, 0.5]), 0.0);
        assert_eq!(run(&[vec![1.0, 0.0]], vec![0.0, 0.0]), 1.0);
        assert_eq!(run(&[vec![1.0, 0.0], vec![-1.0, 0.0]], vec![0.0, 0.0]), 1.0);
    }

    #[test]
    fn running_means() {
        let mut s = ClassMeanState::new(2, 2);
        s.update(&Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 0.0]]), &[Some(0), Some(0)]);
        assert_eq!(s.center.row_slice(0), &[2.0, 0.0]);
        assert_eq!(s.center_count, vec![2, 0]);
        assert_eq!(s.center.row_slice(1), &[0.0, 0.0]);
        s.update(&Tensor::row(vec![5.0, 0.0]), &[Some(0)]);
        assert_eq!(s.center.row_slice(0), &[3.0, 0.0]);
        assert_eq!(s.center_count, vec![3, 0]);
    }

    #[test]
    fn mu_bar_swaps_only_at_epoch_end() {
        let mut s = ClassMeanState::new(2, 2);
        s.update(&Tensor::from_rows(&[vec![3.0, 4.0]]), &[Some(1)]);
        assert!(!s.mu_ready);
        assert_eq!(s.mu_bar.data(), &[0.0; 4]);
        s.end_epoch();
        assert!(s.mu_ready);
        assert_eq!(s.mu_bar.row_slice(1), &[0.6, 0.8]);
        assert_eq!(s.epoch_count, vec![0, 0]);
        s.end_epoch();
        assert_eq!(s.mu_bar.row_slice(1), &[0.6, 0.8]);
    }

    #[test]
    fn unseen_class_center_uses_batch_mean() {
        let s = ClassMeanState::new(2, 1);
        let f = Tensor::column(vec![1.0, 3.0, 10.0]);
        let c = s.centers_for(&f, &[Some(1), Some(1), None]);
        assert_eq!(c.data(), &[0.0, 2.0]);
    }

    #[test]
    fn combine_with_paper_weights() {
        let cfg = LossConfig::nuscenes();
        assert!((combine(&[1.0; 5], &cfg) - 3.3).abs() < 1e-12);
        let only_ce = LossConfig {
            lambda: [1.0, 0.0, 0.0, 0.0, 0.0],
            ..cfg.clone()
        };
        assert!((combine(&[0.7, 5.0, 5.0, 5.0, 5.0], &only_ce) - 0.7).abs() < 1e-15);
        let mut ablated = cfg.clone();
        ablated.enabled.objectosphere = false;
        ablated.enabled.contrastive = false;
        ablated.enabled.center = false;
        let v = [0.4, 0.2, 9.0, 9.0, 9.0];
        assert!((combine(&v, &ablated) - (0.4 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn total_loss_matches_combine() {
        let cfg = LossConfig::nuscenes();
        let mut t = Tape::new();
        let vals = [0.3, 0.2, 0.5, 1.5, 0.7];
        let terms = vals.map(|v| Some(t.constant(Tensor::scalar(v))));
        let total = total_loss(&mut t, &terms, &cfg);
        assert!((t.scalar(total) - combine(&vals, &cfg)).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::nuscenes().validate().is_ok());
        let bad = LossConfig {
            tau: 0.0,
            ..LossConfig::nuscenes()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            lambda: [0.0; 5],
            ..LossConfig::nuscenes()
        };
        assert!(bad.validate().is_err());
        assert!(bad.validate_params().is_ok());
    }

    #[test]
    fn inverse_sqrt_weights_have_mean_one() {
        let w = inverse_sqrt_frequency(&[400, 100, 25, 0]);
        let seen = &w[..3];
        assert!((seen.iter().sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
        assert!((w[1] / w[0] - 2.0).abs() < 1e-12);
        assert_eq!(w[3], 1.0);
    }

    #[test]
    fn objectosphere_gradient_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let f: Vec<f64> = (0..4).map(|_| rng.random_range(-0.4..0.4)).collect();
            for known in [false, true] {
                let mut t = Tape::new();
                let v = t.param(Tensor::row(f.clone()));
                let l = objectosphere(&mut t, v, &[known], 1.0);
                let g = t.backward(l.value).get_or_zeros(&t, v);
                // descent direction -g compared with f
                let along: f64 = g.iter().zip(&f).map(|(g, f)| -g * f).sum();
                if known {
                    assert!(along > 0.0, "known voxel should move outward");
                } else {
                    assert!(along < 0.0, "unknown voxel should move inward");
                }
            }
        }
    }

    #[test]
    fn contrastive_ignores_positive_rescaling() {
        let f = random(6, 3, 8);
        let y = [Some(0), Some(1), Some(2), Some(0), Some(1), None];
        let mu = random(3, 3, 9);
        let base = eval(|t| {
            let v = t.param(f.clone());
            contrastive(t, v, &y, &mu, 0.1)
        })
        .0;
        for s in [0.01, 3.0, 250.0] {
            let mut scaled = f.clone();
            scaled.data_mut().iter_mut().for_each(|v| *v *= s);
            let v = eval(|t| {
                let v = t.param(scaled.clone());
                contrastive(t, v, &y, &mu, 0.1)
            })
            .0;
            assert!((v - base).abs() < 1e-9, "scale {s}: {v} vs {base}");
        }
    }

    #[test]
    fn every_loss_passes_grad_check() {
        let y = vec![Some(0), Some(2), None, Some(1), Some(0), Some(2)];
        let mask: Vec<bool> = y.iter().map(Option::is_some).collect();
        let mu = random(3, 3, 21);
        let centers = random(3, 3, 22);
        // Features away from the hinge: known norms^2 well below eta=4.
        let f = random(6, 3, 20);
        let checks: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Var>)> = vec![
            ("ce", Box::new(|t, x| weighted_ce(t, x, &y, &[1.2, 0.7, 1.1]).value)),
            ("lovasz", Box::new(|t, x| lovasz_softmax(t, x, &y).value)),
            ("objectosphere", Box::new(|t, x| objectosphere(t, x, &mask, 4.0).value)),
            ("contrastive", Box::new(|t, x| contrastive(t, x, &y, &mu, 0.1).value)),
            ("center", Box::new(|t, x| center_loss(t, x, &y, &centers).value)),
            (
                "total",
                Box::new(|t, x| {
                    let terms = [
                        Some(weighted_ce(t, x, &y, &[1.0; 3]).value),
                        Some(lovasz_softmax(t, x, &y).value),
                        Some(objectosphere(t, x, &mask, 4.0).value),
                        Some(contrastive(t, x, &y, &mu, 0.1).value),
                        Some(center_loss(t, x, &y, &centers).value),
                    ];
                    total_loss(t, &terms, &LossConfig::nuscenes())
                }),
            ),
        ];
        for (name, f_loss) in &checks {
            let r = grad_check(|t, x| f_loss(t, x), &f, 1e-6);
            assert!(r.max_rel_error <= 1e-4, "{name}: {}", r.max_rel_error);
        }
    }

    proptest! {
        #[test]
        fn losses_are_non_negative(
            vals in prop::collection::vec(-5.0f64..5.0, 15),
            labels in prop::collection::vec(prop::option::of(0usize..3), 5),
            eta in 0.1f64..3.0,
        ) {
            let f = Tensor::new(5, 3, vals);
            let mask: Vec<bool> = labels.iter().map(Option::is_some).collect();
            let mu = Tensor::identity(3);
            let centers = Tensor::zeros(3, 3);
            let results = [
                eval(|t| { let x = t.param(f.clone()); weighted_ce(t, x, &labels, &[1.0; 3]) }).0,
                eval(|t| { let x = t.param(f.clone()); lovasz_softmax(t, x, &labels) }).0,
                eval(|t| { let x = t.param(f.clone()); objectosphere(t, x, &mask, eta) }).0,
                eval(|t| { let x = t.param(f.clone()); contrastive(t, x, &labels, &mu, 0.1) }).0,
                eval(|t| { let x = t.param(f.clone()); center_loss(t, x, &labels, &centers) }).0,
            ];
            for r in results {
                prop_assert!(r >= 0.0 && r.is_finite(), "{results:?}");
            }
            let ls = results[1];
            prop_assert!(ls <= 1.0 + 1e-12);
        }
    }
}
