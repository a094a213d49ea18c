use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{mean, median, sample_variance};

fn check(estimates: &[Vec<f64>], truth: &[f64]) -> Result<()> {
    if estimates.is_empty() {
        return Err(Error::InvalidArgument("no replicates".into()));
    }
    if let Some(r) = estimates.iter().position(|e| e.len() != truth.len()) {
        return Err(Error::InvalidArgument(format!(
            "replicate {r} has {} estimates for {} individuals",
            estimates[r].len(),
            truth.len()
        )));
    }
    Ok(())
}

/// Root mean square over individuals of the per-individual median error
/// across replicates. `estimates[r][j]` is replicate `r`'s estimate for
/// individual `j`.
pub fn rmsme(estimates: &[Vec<f64>], truth: &[f64]) -> Result<f64> {
    check(estimates, truth)?;
    let mut errs = Vec::with_capacity(estimates.len());
    let mut total = 0.0;
    for (j, t) in truth.iter().enumerate() {
        errs.clear();
        errs.extend(estimates.iter().map(|e| e[j] - t));
        total += median(&errs).powi(2);
    }
    Ok((total / truth.len() as f64).sqrt())
}

pub fn rmse(estimate: &[f64], truth: &[f64]) -> f64 {
    let ss: f64 = estimate.iter().zip(truth).map(|(e, t)| (e - t).powi(2)).sum();
    (ss / truth.len() as f64).sqrt()
}

/// Mean over replicates of each replicate's RMSE.
pub fn rmse_mean(estimates: &[Vec<f64>], truth: &[f64]) -> Result<f64> {
    check(estimates, truth)?;
    Ok(estimates.iter().map(|e| rmse(e, truth)).sum::<f64>() / estimates.len() as f64)
}

/// Distribution over individuals of the fraction of replicates whose band
/// contains the truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
    /// Fraction of replicates covering the truth over all individuals and
    /// replicates together.
    pub marginal: f64,
}

/// `bands[r]` holds `(lower, upper)` vectors for replicate `r`.
pub fn coverage_summary(bands: &[(Vec<f64>, Vec<f64>)], truth: &[f64]) -> Result<CoverageSummary> {
    if bands.is_empty() || truth.is_empty() {
        return Err(Error::InvalidArgument("coverage needs replicates and individuals".into()));
    }
    if bands.iter().any(|(l, u)| l.len() != truth.len() || u.len() != truth.len()) {
        return Err(Error::InvalidArgument("band length differs from truth".into()));
    }
    let per: Vec<f64> = (0..truth.len())
        .map(|j| {
            let hit = bands
                .iter()
                .filter(|(l, u)| l[j] <= truth[j] && truth[j] <= u[j])
                .count();
            hit as f64 / bands.len() as f64
        })
        .collect();
    let m = mean(&per);
    Ok(CoverageSummary {
        mean: m,
        median: median(&per),
        sd: if per.len() > 1 { sample_variance(&per).sqrt() } else { 0.0 },
        min: per.iter().copied().fold(f64::INFINITY, f64::min),
        max: per.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        marginal: m,
    })
}
