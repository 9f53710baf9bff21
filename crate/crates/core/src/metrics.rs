//! Evaluation metrics: minADE_k, minFDE_k over top-k most-probable modes,
//! and the 2 m miss rate (strict inequality).

use crate::error::{Error, Result};
use crate::tensor::Arr;

/// Aggregated evaluation over a batch of samples.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalResult {
    pub min_ade5: f64,
    pub min_ade10: f64,
    pub min_fde1: f64,
    pub min_fde10: f64,
    pub miss_rate: f64,
    pub n_samples: usize,
    pub n_skipped: usize,
}

/// Indices of the `k` highest-probability modes, probability-descending,
/// ties broken by lower index.
pub fn topk_by_prob(probs: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    order.truncate(k.min(probs.len()));
    order
}

/// min over the top-k most-probable modes of the mean Euclidean distance to
/// the ground truth over valid steps. Returns None when no step is valid.
pub fn min_ade(traj: &Arr, probs: &[f64], y: &Arr, mask: &[bool], k: usize) -> Option<f64> {
    let t = y.shape()[0];
    if !mask.iter().take(t).any(|&v| v) {
        return None;
    }
    let n_valid = mask.iter().take(t).filter(|&&v| v).count() as f64;
    topk_by_prob(probs, k)
        .into_iter()
        .map(|m| {
            (0..t)
                .filter(|&s| mask[s])
                .map(|s| {
                    let dx = traj[[m, s, 0]] - y[[s, 0]];
                    let dy = traj[[m, s, 1]] - y[[s, 1]];
                    (dx * dx + dy * dy).sqrt()
                })
                .sum::<f64>()
                / n_valid
        })
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v))))
}

/// min over the top-k most-probable modes of the final-step displacement.
/// The final step is the last valid one; None if no step is valid.
pub fn min_fde(traj: &Arr, probs: &[f64], y: &Arr, mask: &[bool], k: usize) -> Option<f64> {
    let t = y.shape()[0];
    let last = (0..t).rev().find(|&s| mask[s])?;
    topk_by_prob(probs, k)
        .into_iter()
        .map(|m| {
            let dx = traj[[m, last, 0]] - y[[last, 0]];
            let dy = traj[[m, last, 1]] - y[[last, 1]];
            (dx * dx + dy * dy).sqrt()
        })
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v))))
}

/// Fraction of samples whose FDE strictly exceeds `threshold` meters.
/// An FDE of exactly `threshold` counts as a hit.
pub fn miss_rate(fdes: &[f64], threshold: f64) -> Result<f64> {
    if fdes.is_empty() {
        return Err(Error::Model("miss rate of an empty batch is undefined".into()));
    }
    let misses = fdes.iter().filter(|&&f| f > threshold).count();
    Ok(misses as f64 / fdes.len() as f64)
}

pub const MISS_THRESHOLD_M: f64 = 2.0;

/// Streaming accumulator for [`EvalResult`].
#[derive(Debug, Default)]
pub struct EvalAccumulator {
    ade5: f64,
    ade10: f64,
    fde1: f64,
    fde10: f64,
    fde10s: Vec<f64>,
    n: usize,
    skipped: usize,
}

impl EvalAccumulator {
    pub fn new() -> EvalAccumulator {
        EvalAccumulator::default()
    }

    /// Adds one sample: `traj` (K, T, 2) predicted means, `probs` mode
    /// probabilities, `y` (T, 2) ground truth, `mask` valid steps.
    pub fn push(&mut self, traj: &Arr, probs: &[f64], y: &Arr, mask: &[bool]) {
        let k = probs.len();
        let (Some(a5), Some(a10), Some(f1), Some(f10)) = (
            min_ade(traj, probs, y, mask, 5.min(k)),
            min_ade(traj, probs, y, mask, k),
            min_fde(traj, probs, y, mask, 1),
            min_fde(traj, probs, y, mask, k),
        ) else {
            self.skipped += 1;
            return;
        };
        self.ade5 += a5;
        self.ade10 += a10;
        self.fde1 += f1;
        self.fde10 += f10;
        self.fde10s.push(f10);
        self.n += 1;
    }

    pub fn finish(&self) -> Result<EvalResult> {
        if self.n == 0 {
            return Err(Error::Model("no evaluable samples".into()));
        }
        let n = self.n as f64;
        Ok(EvalResult {
            min_ade5: self.ade5 / n,
            min_ade10: self.ade10 / n,
            min_fde1: self.fde1 / n,
            min_fde10: self.fde10 / n,
            miss_rate: miss_rate(&self.fde10s, MISS_THRESHOLD_M)?,
            n_samples: self.n,
            n_skipped: self.skipped,
        })
    }
}
