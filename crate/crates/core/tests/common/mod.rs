//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use lidar_oss::autodiff::{Tape, Tensor};
use lidar_oss::losses::lovasz_on_probs;
use lidar_oss::metrics::BinaryScoredSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fraction of (positive, negative) pairs ranked correctly, ties as half.
pub fn auroc_pairs(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

/// Average precision by recounting precision and recall at every distinct
/// threshold from scratch.
pub fn ap_thresholds(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let total_pos = positive.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let selected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = selected.iter().filter(|&&i| positive[i]).count();
        let recall = tp as f64 / total_pos as f64;
        let precision = tp as f64 / selected.len() as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

/// Random scored set of size `1..=200`; every third instance draws scores
/// from a handful of values to force large tie groups.
pub fn random_instance(rng: &mut ChaCha8Rng, index: usize) -> BinaryScoredSet {
    let n = rng.random_range(1..=200);
    let tie_heavy = index % 3 == 0;
    let prevalence = rng.random_range(0.05..0.95);
    let mut set = BinaryScoredSet::default();
    for _ in 0..n {
        let s = if tie_heavy {
            rng.random_range(0..4) as f64 * 0.25
        } else {
            rng.random_range(-3.0..3.0)
        };
        set.push(s, rng.random_bool(prevalence));
    }
    set
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mean over ground-truth classes of `1 - IoU` between hard labels.
pub fn one_minus_jaccard(gt: &[usize], pred: &[usize], k: usize) -> f64 {
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..k {
        if !gt.contains(&c) {
            continue;
        }
        present += 1;
        let inter = gt.iter().zip(pred).filter(|(g, p)| **g == c && **p == c).count();
        let union = gt.iter().zip(pred).filter(|(g, p)| **g == c || **p == c).count();
        sum += 1.0 - inter as f64 / union as f64;
    }
    sum / present as f64
}

/// Jaccard set loss of a mistake set for one class: `|M| / |gt ∪ M|`.
fn jaccard_set_loss(mistakes: &[bool], fg: &[bool]) -> f64 {
    let m = mistakes.iter().filter(|&&x| x).count();
    if m == 0 {
        return 0.0;
    }
    let union = mistakes.iter().zip(fg).filter(|(m, g)| **m || **g).count();
    m as f64 / union as f64
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Lovász extension of the per-class Jaccard loss evaluated as the maximum
/// over every ordering of the greedy chain sum, averaged over present
/// classes. Valid because the Jaccard loss is submodular.
pub fn lovasz_extension_brute(probs: &[Vec<f64>], gt: &[usize]) -> f64 {
    let n = gt.len();
    let k = probs[0].len();
    let perms = permutations(n);
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..k {
        let fg: Vec<bool> = gt.iter().map(|&y| y == c).collect();
        if !fg.contains(&true) {
            continue;
        }
        present += 1;
        let err: Vec<f64> = (0..n)
            .map(|i| if fg[i] { 1.0 - probs[i][c] } else { probs[i][c] })
            .collect();
        let mut best = f64::NEG_INFINITY;
        for p in &perms {
            let mut set = vec![false; n];
            let mut prev = 0.0;
            let mut acc = 0.0;
            for &i in p {
                set[i] = true;
                let cur = jaccard_set_loss(&set, &fg);
                acc += err[i] * (cur - prev);
                prev = cur;
            }
            best = best.max(acc);
        }
        sum += best;
    }
    sum / present as f64
}

/// Library Lovász-softmax evaluated directly on a probability matrix.
pub fn lovasz_value(probs: &[Vec<f64>], gt: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::from_rows(probs));
    let loss = lovasz_on_probs(&mut tape, p, gt);
    tape.scalar(loss.value)
}

/// Every length-`n` word over `k` symbols.
pub fn all_words(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|w| {
                (0..k).map(move |c| {
                    let mut v = w.clone();
                    v.push(c);
                    v
                })
            })
            .collect();
    }
    out
}
