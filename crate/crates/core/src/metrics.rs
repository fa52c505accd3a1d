//! Closed-set IoU and threshold-free anomaly metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// `K x K` counts, rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let k = rows.len();
        assert!(rows.iter().all(|r| r.len() == k), "confusion matrix must be square");
        ConfusionMatrix {
            k,
            counts: rows.concat(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.k + pred] += 1;
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds another matrix of the same size.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.k, other.k, "cannot merge confusion matrices of different size");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Per-class IoU over `eval_classes` and their mean. Classes with an empty
/// union are `None` and excluded from the mean; the mean is `None` when
/// every class is.
pub fn miou(cm: &ConfusionMatrix, eval_classes: &[usize]) -> (Vec<Option<f64>>, Option<f64>) {
    let k = cm.num_classes();
    let per: Vec<Option<f64>> = eval_classes
        .iter()
        .map(|&c| {
            let tp = cm.get(c, c);
            let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| cm.get(c, p)).sum();
            let fp: u64 = (0..k).filter(|&t| t != c).map(|t| cm.get(t, c)).sum();
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let defined: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    (per, mean)
}

/// Scores with a binary unknown flag; positives are unknown.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BinaryScoredSet {
    pub scores: Vec<f64>,
    pub is_unknown: Vec<bool>,
}

impl BinaryScoredSet {
    pub fn new(scores: Vec<f64>, is_unknown: Vec<bool>) -> Self {
        assert_eq!(scores.len(), is_unknown.len(), "scores and labels differ in length");
        BinaryScoredSet { scores, is_unknown }
    }

    pub fn push(&mut self, score: f64, is_unknown: bool) {
        self.scores.push(score);
        self.is_unknown.push(is_unknown);
    }

    pub fn extend(&mut self, other: &BinaryScoredSet) {
        self.scores.extend_from_slice(&other.scores);
        self.is_unknown.extend_from_slice(&other.is_unknown);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.is_unknown.iter().filter(|&&u| u).count()
    }

    /// `(positives, negatives)` per distinct score, highest score first.
    fn tie_groups_descending(&self) -> Vec<(u64, u64)> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut groups: Vec<(u64, u64)> = Vec::new();
        let mut prev: Option<f64> = None;
        for i in order {
            let s = self.scores[i];
            if prev != Some(s) {
                groups.push((0, 0));
                prev = Some(s);
            }
            let g = groups.last_mut().expect("group pushed");
            if self.is_unknown[i] {
                g.0 += 1;
            } else {
                g.1 += 1;
            }
        }
        groups
    }
}

/// Area under the ROC curve: probability that a random positive outscores a
/// random negative, ties counted as one half.
pub fn auroc(set: &BinaryScoredSet) -> Result<f64> {
    let groups = set.tie_groups_descending();
    let pos: u64 = groups.iter().map(|g| g.0).sum();
    let neg: u64 = groups.iter().map(|g| g.1).sum();
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs at least one positive and one negative"));
    }
    let mut neg_below = neg as f64;
    let mut acc = 0.0;
    for (p, n) in groups {
        neg_below -= n as f64;
        acc += p as f64 * neg_below + 0.5 * p as f64 * n as f64;
    }
    Ok(acc / (pos as f64 * neg as f64))
}

/// Average precision: sum over descending distinct thresholds of recall
/// increase times precision, each tie group taken as one step.
pub fn aupr(set: &BinaryScoredSet) -> Result<f64> {
    let groups = set.tie_groups_descending();
    let pos: u64 = groups.iter().map(|g| g.0).sum();
    if pos == 0 {
        return Err(Error::UndefinedMetric("AUPR needs at least one positive"));
    }
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut ap = 0.0;
    for (p, n) in groups {
        tp += p;
        fp += n;
        if p > 0 {
            ap += (p as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub scans: u64,
    pub points: u64,
    pub known_points: u64,
    pub unknown_points: u64,
    pub outside_points: u64,
    pub flagged_points: u64,
}

/// JSON metrics document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub miou: Option<f64>,
    /// Raw class id (as a string key) to IoU; `null` when undefined.
    pub per_class_iou: BTreeMap<String, Option<f64>>,
    pub aupr: Option<f64>,
    pub auroc: Option<f64>,
    pub counts: EvalCounts,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
