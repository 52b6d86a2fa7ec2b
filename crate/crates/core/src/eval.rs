//! Structure scoring and forecast metrics.

use serde::{Deserialize, Serialize};

use crate::encoder::CausalStructure;
use crate::error::{GcaError, Result};
use crate::model::Domain;
use crate::objective;
use crate::synthgen::GroundTruthStructure;
use crate::tensor::Tensor;

/// Average precision of `scores` against binary `labels`.
///
/// Scores are ranked in decreasing order and tied scores enter the curve as
/// one group: precision and recall are evaluated only after a whole group,
/// and each group contributes `Δrecall · precision`.
pub fn auprc_scores(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(GcaError::shape("auprc", scores.len(), labels.len()));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(GcaError::NonFinite(format!("auprc score {bad}")));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(GcaError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut area, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += labels[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / seen as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

/// Pooled AUPRC of edge probabilities against a ground-truth structure.
pub fn auprc(
    probs: &CausalStructure,
    truth: &GroundTruthStructure,
    include_diagonal: bool,
) -> Result<f64> {
    if probs.max_lag() != truth.max_lag || probs.dims() != truth.dims {
        return Err(GcaError::shape(
            "auprc structure",
            format!("k={} D={}", truth.max_lag, truth.dims),
            format!("k={} D={}", probs.max_lag(), probs.dims()),
        ));
    }
    let d = truth.dims;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (j, slice) in probs.slices.iter().enumerate() {
        for u in 0..d {
            for v in 0..d {
                if include_diagonal || u != v {
                    scores.push(slice.get(u, v));
                    labels.push(truth.adjacency[j][u][v] == 1);
                }
            }
        }
    }
    auprc_scores(&scores, &labels)
}

/// Mean absolute difference between two structures (no gradients).
pub fn structure_l1(a: &CausalStructure, b: &CausalStructure) -> Result<f64> {
    objective::discrepancy(a, b)
}

/// Root mean squared error over all entries of paired tensors.
pub fn rmse(forecasts: &[Tensor], targets: &[Tensor]) -> Result<f64> {
    let (sq, _, n) = error_sums(forecasts, targets)?;
    Ok((sq / n).sqrt())
}

pub fn mae(forecasts: &[Tensor], targets: &[Tensor]) -> Result<f64> {
    let (_, abs, n) = error_sums(forecasts, targets)?;
    Ok(abs / n)
}

fn error_sums(forecasts: &[Tensor], targets: &[Tensor]) -> Result<(f64, f64, f64)> {
    if forecasts.len() != targets.len() {
        return Err(GcaError::shape(
            "metric inputs",
            targets.len(),
            forecasts.len(),
        ));
    }
    let (mut sq, mut abs, mut n) = (0.0, 0.0, 0usize);
    for (f, t) in forecasts.iter().zip(targets) {
        if f.shape() != t.shape() {
            return Err(GcaError::shape(
                "metric tensor",
                format!("{:?}", t.shape()),
                format!("{:?}", f.shape()),
            ));
        }
        for (a, b) in f.data().iter().zip(t.data()) {
            sq += (a - b) * (a - b);
            abs += (a - b).abs();
        }
        n += f.len();
    }
    if n == 0 {
        return Err(GcaError::EmptyPartition("metric inputs"));
    }
    Ok((sq, abs, n as f64))
}

/// Average ranks (1-based), ties sharing the mean rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Per-epoch diagnostics written by the trainer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub temperature: f64,
    pub train_loss: f64,
    pub val_rmse: f64,
    #[serde(default)]
    pub test_rmse: Option<f64>,
    #[serde(default)]
    pub test_mae: Option<f64>,
    #[serde(default)]
    pub auprc_source: Option<f64>,
    #[serde(default)]
    pub auprc_target: Option<f64>,
    /// Mean absolute difference between the source and target structures.
    #[serde(default)]
    pub structure_l1: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub epoch: usize,
    pub auprc: f64,
    pub rmse: f64,
}

/// Per-epoch `(AUPRC, test RMSE)` pairs, unchanged from the log.
pub fn auprc_vs_rmse_trace(epochs: &[EpochRecord], domain: Domain) -> Result<Vec<TracePoint>> {
    epochs
        .iter()
        .map(|e| {
            let (auprc, name) = match domain {
                Domain::Source => (e.auprc_source, "auprc_source"),
                Domain::Target => (e.auprc_target, "auprc_target"),
            };
            Ok(TracePoint {
                epoch: e.epoch,
                auprc: auprc
                    .ok_or_else(|| GcaError::MissingField(format!("epochs[{}].{name}", e.epoch)))?,
                rmse: e.test_rmse.ok_or_else(|| {
                    GcaError::MissingField(format!("epochs[{}].test_rmse", e.epoch))
                })?,
            })
        })
        .collect()
}
