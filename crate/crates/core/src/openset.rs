//! Max-logit anomaly detection on open-set features and fusion with the
//! closed-set prediction.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::io::ClassId;
use crate::network::predict_closed;
use crate::voxel::{propagate_to_points, KnownClasses, VoxelMapping};
use crate::{Error, Result};

/// Confidence value marking a voxel unknown.
pub const UNKNOWN_CONFIDENCE: f64 = 1.0;
/// Confidence value for voxels kept as known.
pub const KNOWN_CONFIDENCE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Negated max logit: higher means more anomalous.
    NegMaxLogit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpenSetConfig {
    /// Voxels with max logit `<= xi` are unknown.
    pub xi: f64,
    pub unknown_output_id: ClassId,
    pub score_mode: ScoreMode,
}

impl Default for OpenSetConfig {
    fn default() -> Self {
        OpenSetConfig {
            xi: 0.65,
            unknown_output_id: 1,
            score_mode: ScoreMode::NegMaxLogit,
        }
    }
}

impl OpenSetConfig {
    pub fn validate(&self, known: &KnownClasses) -> Result<()> {
        if !self.xi.is_finite() {
            return Err(Error::Config(format!("xi must be finite, got {}", self.xi)));
        }
        if known.contains(self.unknown_output_id) {
            return Err(Error::Config(format!(
                "unknown_output_id {} is also a known class",
                self.unknown_output_id
            )));
        }
        Ok(())
    }
}

/// Largest entry of an open-set feature row.
pub fn max_logit(row: &[f64]) -> f64 {
    assert!(!row.is_empty(), "max_logit: empty feature row");
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Two-valued confidence: [`UNKNOWN_CONFIDENCE`] when `m <= xi`, else
/// [`KNOWN_CONFIDENCE`].
pub fn confidence(m: f64, xi: f64) -> f64 {
    if m <= xi {
        UNKNOWN_CONFIDENCE
    } else {
        KNOWN_CONFIDENCE
    }
}

/// Continuous anomaly score used for threshold-free metrics.
pub fn anomaly_score(row: &[f64]) -> f64 {
    -max_logit(row)
}

/// Replaces the closed-set label with `unknown_output_id` wherever the
/// confidence marks the voxel unknown.
pub fn fuse(closed: &[ClassId], confidences: &[f64], cfg: &OpenSetConfig) -> Vec<ClassId> {
    assert_eq!(
        closed.len(),
        confidences.len(),
        "fuse: {} labels but {} confidences",
        closed.len(),
        confidences.len()
    );
    closed
        .iter()
        .zip(confidences)
        .map(|(&l, &s)| if s == UNKNOWN_CONFIDENCE { cfg.unknown_output_id } else { l })
        .collect()
}

/// Per-voxel and per-point open-set segmentation output.
#[derive(Debug, Clone, PartialEq)]
pub struct OssResult {
    pub max_logit: Vec<f64>,
    pub confidence: Vec<f64>,
    pub score: Vec<f64>,
    /// Closed-set prediction as raw class ids.
    pub closed: Vec<ClassId>,
    /// Fused voxel labels.
    pub voxel_labels: Vec<ClassId>,
    /// Fused labels per point; points outside the grid are unknown.
    pub point_labels: Vec<ClassId>,
    /// Anomaly score per point; `+inf` outside the grid.
    pub point_scores: Vec<f64>,
}

impl OssResult {
    pub fn flagged_voxels(&self) -> usize {
        self.confidence.iter().filter(|&&s| s == UNKNOWN_CONFIDENCE).count()
    }
}

/// Runs detection and fusion on network outputs for one scan.
pub fn segment(
    f_s: &Tensor,
    f_o: &Tensor,
    mapping: &VoxelMapping,
    known: &KnownClasses,
    cfg: &OpenSetConfig,
) -> OssResult {
    assert_eq!(f_s.rows(), mapping.num_voxels(), "segment: logits do not match voxels");
    assert_eq!(f_o.rows(), mapping.num_voxels(), "segment: features do not match voxels");
    let max: Vec<f64> = (0..f_o.rows()).map(|r| max_logit(f_o.row_slice(r))).collect();
    let conf: Vec<f64> = max.iter().map(|&m| confidence(m, cfg.xi)).collect();
    let score: Vec<f64> = match cfg.score_mode {
        ScoreMode::NegMaxLogit => max.iter().map(|m| -m).collect(),
    };
    let closed: Vec<ClassId> = predict_closed(f_s).into_iter().map(|c| known.id_of(c)).collect();
    let voxel_labels = fuse(&closed, &conf, cfg);
    let point_labels = propagate_to_points(&voxel_labels, mapping, cfg.unknown_output_id);
    let point_scores = propagate_to_points(&score, mapping, f64::INFINITY);
    OssResult {
        max_logit: max,
        confidence: conf,
        score,
        closed,
        voxel_labels,
        point_labels,
        point_scores,
    }
}
