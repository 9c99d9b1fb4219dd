//! Quantile score, interval length/coverage and the improved-rate statistic.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradtape::tilted;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("quantile level {0} not present in batch")]
    LevelMissing(f64),
    #[error("station sets differ: {0} candidate vs {1} baseline scores")]
    StationMismatch(usize, usize),
    #[error("empty or ragged batch")]
    BadBatch,
}

/// Observations and one prediction row per quantile level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalBatch {
    pub y: Vec<f64>,
    /// `preds[q][i]` is the level-`levels[q]` forecast of `y[i]`.
    pub preds: Vec<Vec<f64>>,
    pub levels: Vec<f64>,
}

impl EvalBatch {
    pub fn new(y: Vec<f64>, preds: Vec<Vec<f64>>, levels: Vec<f64>) -> Result<Self, MetricsError> {
        let ok = !y.is_empty()
            && !levels.is_empty()
            && preds.len() == levels.len()
            && preds.iter().all(|p| p.len() == y.len())
            && levels.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(Self { y, preds, levels })
        } else {
            Err(MetricsError::BadBatch)
        }
    }

    fn row(&self, q: f64) -> Result<&[f64], MetricsError> {
        self.levels
            .iter()
            .position(|l| (l - q).abs() < 1e-12)
            .map(|k| self.preds[k].as_slice())
            .ok_or(MetricsError::LevelMissing(q))
    }
}

/// Mean tilted loss at level `q`.
pub fn quantile_score(batch: &EvalBatch, q: f64) -> Result<f64, MetricsError> {
    let row = batch.row(q)?;
    let total: f64 = batch.y.iter().zip(row).map(|(y, p)| tilted(q, *y, *p)).sum();
    Ok(total / batch.y.len() as f64)
}

/// `(MIL, ICP)` of the interval spanned by the lowest and highest levels.
pub fn interval_metrics(batch: &EvalBatch) -> Result<(f64, f64), MetricsError> {
    let lo = batch.row(batch.levels[0])?;
    let hi = batch.row(*batch.levels.last().ok_or(MetricsError::BadBatch)?)?;
    let n = batch.y.len() as f64;
    let mil = lo.iter().zip(hi).map(|(a, b)| (b - a).abs()).sum::<f64>() / n;
    let covered = batch
        .y
        .iter()
        .zip(lo.iter().zip(hi))
        .filter(|(y, (a, b))| *a <= *y && *y <= *b)
        .count();
    Ok((mil, covered as f64 / n))
}

/// Per-station evaluation summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationMetrics {
    /// QS averaged over levels.
    pub qs: f64,
    /// QS summed over levels.
    pub qs_sum: f64,
    pub qs_per_level: Vec<f64>,
    pub mil: f64,
    pub icp: f64,
}

pub fn evaluate(batch: &EvalBatch) -> Result<StationMetrics, MetricsError> {
    let per: Vec<f64> = batch
        .levels
        .iter()
        .map(|q| quantile_score(batch, *q))
        .collect::<Result<_, _>>()?;
    let sum: f64 = per.iter().sum();
    let (mil, icp) = interval_metrics(batch)?;
    Ok(StationMetrics {
        qs: sum / per.len() as f64,
        qs_sum: sum,
        qs_per_level: per,
        mil,
        icp,
    })
}

/// How "better" is judged when comparing per-station scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Orientation {
    LowerIsBetter,
    /// Closer to the given nominal value is better (coverage).
    CloserTo(f64),
}

/// Fraction of stations where `candidate` is strictly better than `baseline`.
pub fn improved_rate(candidate: &[f64], baseline: &[f64], orientation: Orientation) -> Result<f64, MetricsError> {
    if candidate.len() != baseline.len() || candidate.is_empty() {
        return Err(MetricsError::StationMismatch(candidate.len(), baseline.len()));
    }
    let better = candidate
        .iter()
        .zip(baseline)
        .filter(|(c, b)| match orientation {
            Orientation::LowerIsBetter => c < b,
            Orientation::CloserTo(t) => (*c - t).abs() < (*b - t).abs(),
        })
        .count();
    Ok(better as f64 / candidate.len() as f64)
}
