//! Half-sample bootstrap confidence bands for `theta(X)`.
//!
//! Nuisances stay fixed. Each draw refits stage two (and, for the EP
//! family, reruns targeting with the full-sample sieve bounds) on a random
//! half of the rows. With `R*_b(x) = theta_b(x) - theta(x)`:
//! `lambda^2(x) = Var_b(sqrt(n) R*_b(x))`,
//! `S*_b = sqrt(n) max_x |R*_b(x)| / lambda(x)`, `cv` is the `1 - alpha`
//! quantile of `S*`, and the band is `theta(x) +- lambda(x) cv / sqrt(n)`.

use ndarray::ArrayView2;
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::learners::LearnerSpec;
use crate::meta::{sieve_for, stage_one, stage_two, CateLearner, NuisanceBundle, PipelineConfig, Variant};
use crate::seed;
use crate::stats::{empirical_quantile, sample_variance};

pub const MIN_DRAWS: usize = 20;
pub const LAMBDA_FLOOR: f64 = 1e-12;

/// Raw half-sample draws, from which bands at any level can be formed.
#[derive(Clone, Debug, PartialEq)]
pub struct HalfSampleDraws {
    pub theta_hat: Vec<f64>,
    /// `deviations[b][j] = theta_b(x_j) - theta(x_j)`.
    pub deviations: Vec<Vec<f64>>,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapBand {
    pub theta_hat: Vec<f64>,
    pub lambda_hat: Vec<f64>,
    /// Points whose `lambda` hit the floor; they are left out of the sup.
    pub degenerate: Vec<bool>,
    pub cv_alpha: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub alpha: f64,
    pub draws: usize,
    pub n: usize,
}

impl HalfSampleDraws {
    pub fn band(&self, alpha: f64) -> Result<BootstrapBand> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must be in (0, 1), got {alpha}")));
        }
        let b = self.deviations.len();
        let m = self.theta_hat.len();
        let root_n = (self.n as f64).sqrt();
        let mut lambda_hat = Vec::with_capacity(m);
        let mut degenerate = Vec::with_capacity(m);
        let mut column = Vec::with_capacity(b);
        for j in 0..m {
            column.clear();
            column.extend(self.deviations.iter().map(|d| root_n * d[j]));
            let lambda = sample_variance(&column).sqrt();
            degenerate.push(!(lambda >= LAMBDA_FLOOR));
            lambda_hat.push(if lambda >= LAMBDA_FLOOR { lambda } else { LAMBDA_FLOOR });
        }
        let sup: Vec<f64> = self
            .deviations
            .iter()
            .map(|d| {
                (0..m)
                    .filter(|&j| !degenerate[j])
                    .map(|j| root_n * d[j].abs() / lambda_hat[j])
                    .fold(0.0, f64::max)
            })
            .collect();
        let cv_alpha = empirical_quantile(&sup, 1.0 - alpha);
        let half: Vec<f64> = lambda_hat.iter().map(|l| l * cv_alpha / root_n).collect();
        Ok(BootstrapBand {
            lower: self.theta_hat.iter().zip(&half).map(|(t, h)| t - h).collect(),
            upper: self.theta_hat.iter().zip(&half).map(|(t, h)| t + h).collect(),
            theta_hat: self.theta_hat.clone(),
            lambda_hat,
            degenerate,
            cv_alpha,
            alpha,
            draws: b,
            n: self.n,
        })
    }
}

fn check_supported(variant: Variant, config: &PipelineConfig, draws: usize) -> Result<()> {
    if variant.learner == CateLearner::T {
        return Err(Error::Config("the half-sample bootstrap needs a stage-two regression; the T-learner has none".into()));
    }
    if !matches!(config.stage2, LearnerSpec::RandomForest(_)) {
        return Err(Error::Config(format!(
            "the half-sample bootstrap requires a random-forest stage two, got `{}`",
            config.stage2.name()
        )));
    }
    if draws < MIN_DRAWS {
        return Err(Error::Config(format!("bootstrap needs at least {MIN_DRAWS} draws, got {draws}")));
    }
    Ok(())
}

/// Computes the full-sample fit and `draws` half-sample refits, all
/// evaluated on `eval_x`.
pub fn half_sample_draws(
    variant: Variant,
    config: &PipelineConfig,
    data: &Dataset,
    bundle: &NuisanceBundle,
    draws: usize,
    eval_x: ArrayView2<'_, f64>,
    seed: u64,
) -> Result<HalfSampleDraws> {
    check_supported(variant, config, draws)?;
    let n = data.n();
    let half = n / 2;
    if half < 2 {
        return Err(Error::InvalidArgument("too few rows for half-sampling".into()));
    }
    let x = data.x_matrix();
    let basis = match variant.learner {
        CateLearner::Ep | CateLearner::Mep => Some(sieve_for(data, &config.sieve)?),
        _ => None,
    };
    let full = stage_one(variant, data, bundle, &config.sieve, basis.as_ref(), None)?;
    let theta_hat = stage_two(&config.stage2, x.view(), &full.pseudo, seed)?.predict(eval_x)?;
    let deviations: Vec<Result<Vec<f64>>> = (0..draws)
        .into_par_iter()
        .map(|b| {
            let draw_seed = seed::derive(seed, &[seed::BOOTSTRAP, b as u64]);
            let mut rows = index::sample(&mut seed::rng(draw_seed), n, half).into_vec();
            rows.sort_unstable();
            let s1 = stage_one(variant, data, bundle, &config.sieve, basis.as_ref(), Some(&rows))?;
            let xs = x.select(ndarray::Axis(0), &rows);
            let pred = stage_two(&config.stage2, xs.view(), &s1.pseudo, draw_seed)?.predict(eval_x)?;
            Ok(pred.iter().zip(&theta_hat).map(|(p, t)| p - t).collect())
        })
        .collect();
    Ok(HalfSampleDraws {
        theta_hat,
        deviations: deviations.into_iter().collect::<Result<_>>()?,
        n,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn half_sample_bootstrap(
    variant: Variant,
    config: &PipelineConfig,
    data: &Dataset,
    bundle: &NuisanceBundle,
    draws: usize,
    alpha: f64,
    eval_x: ArrayView2<'_, f64>,
    seed: u64,
) -> Result<BootstrapBand> {
    half_sample_draws(variant, config, data, bundle, draws, eval_x, seed)?.band(alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(b: usize, m: usize) -> HalfSampleDraws {
        let deviations = (0..b)
            .map(|i| (0..m).map(|j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.5).collect())
            .collect();
        HalfSampleDraws {
            theta_hat: vec![1.0; m],
            deviations,
            n: 100,
        }
    }

    #[test]
    fn identical_draws_are_degenerate() {
        let d = HalfSampleDraws {
            theta_hat: vec![0.5; 3],
            deviations: vec![vec![0.0; 3]; 25],
            n: 50,
        };
        let band = d.band(0.05).unwrap();
        assert!(band.degenerate.iter().all(|&f| f));
        assert!(band.lower.iter().zip(&band.upper).all(|(l, u)| (u - l).abs() < 1e-9));
    }

    #[test]
    fn smaller_alpha_gives_wider_band() {
        let d = synthetic(40, 5);
        let wide = d.band(0.01).unwrap();
        let narrow = d.band(0.05).unwrap();
        for j in 0..5 {
            assert!(wide.lower[j] <= narrow.lower[j] && narrow.upper[j] <= wide.upper[j]);
            assert!(narrow.lower[j] <= narrow.theta_hat[j] && narrow.theta_hat[j] <= narrow.upper[j]);
        }
    }

    #[test]
    fn width_formula() {
        let d = synthetic(30, 4);
        let band = d.band(0.1).unwrap();
        for j in 0..4 {
            let w = 2.0 * band.lambda_hat[j] * band.cv_alpha / 10.0;
            assert!((band.upper[j] - band.lower[j] - w).abs() < 1e-12);
        }
    }
}
