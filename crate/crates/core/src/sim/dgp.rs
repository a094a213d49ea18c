//! Simulation data-generating processes with known nuisances and effects.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::Result;
use crate::nuisance::NuisanceEstimates;
use crate::seed;
use crate::stats::expit;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DgpId {
    Dgp1,
    Dgp2,
    Dgp3,
    NullEffect,
}

fn ind(b: bool) -> f64 {
    f64::from(u8::from(b))
}

impl DgpId {
    pub fn as_str(self) -> &'static str {
        match self {
            DgpId::Dgp1 => "dgp1",
            DgpId::Dgp2 => "dgp2",
            DgpId::Dgp3 => "dgp3",
            DgpId::NullEffect => "null-effect",
        }
    }

    pub fn n_covariates(self) -> usize {
        match self {
            DgpId::NullEffect => 3,
            _ => 6,
        }
    }

    /// Whether outcomes can be missing in training draws.
    pub fn has_missingness(self) -> bool {
        self != DgpId::NullEffect
    }

    pub fn propensity(self, z: &[f64]) -> f64 {
        match self {
            DgpId::NullEffect => (1.0 + z[0].sin()) / 2.0,
            _ => expit(z[..3].iter().map(|&v| v * v - (3.0 * v).sin()).sum::<f64>() / 1.5),
        }
    }

    /// `P[C = 1 | A, Z]`.
    pub fn observation(self, a: bool, z: &[f64]) -> f64 {
        if self == DgpId::NullEffect {
            return 1.0;
        }
        let strong = ind(z[3].abs() > 0.5) + ind(z[4].abs() > 0.5);
        match self {
            DgpId::Dgp2 => expit(3.0 - 2.75 * strong),
            _ => expit(3.0 - 2.75 * ind(a) * strong),
        }
    }

    /// `E[Y(0) | Z]`.
    pub fn mu0(self, z: &[f64]) -> f64 {
        match self {
            DgpId::Dgp1 | DgpId::Dgp2 => z[2] + z[3],
            DgpId::Dgp3 => z[2..4]
                .iter()
                .map(|&v| (v / 2.0 + 4.0 * ind(v > 0.5) + (4.0 * v).sin()) / 2.0)
                .sum(),
            DgpId::NullEffect => null_effect_probability(z),
        }
    }

    /// `theta(Z) = E[Y(1) - Y(0) | Z]`.
    pub fn theta(self, z: &[f64]) -> f64 {
        match self {
            DgpId::Dgp1 | DgpId::Dgp2 => ind(z[2].abs() > 0.5) + ind(z[3].abs() > 0.5),
            DgpId::Dgp3 | DgpId::NullEffect => 0.0,
        }
    }

    pub fn mu1(self, z: &[f64]) -> f64 {
        self.mu0(z) + self.theta(z)
    }
}

/// Outcome probability of the binary illustration, evaluated term by term
/// as written, including the two terms that cancel.
fn null_effect_probability(z: &[f64]) -> f64 {
    let i1 = ind((-0.5..=0.5).contains(&z[0]));
    let eta = 4.0 * z[0] * z[0] / 2.0 * i1 - z[0] * (1.0 - i1) + z[0] * (1.0 - i1) + z[1] / 2.0 + z[2] / 2.0;
    expit(eta)
}

/// True nuisance values and effects for each row of a draw.
#[derive(Clone, Debug, PartialEq)]
pub struct TrueEffects {
    pub theta: Vec<f64>,
    pub pi: Vec<f64>,
    pub g: Vec<f64>,
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
}

impl TrueEffects {
    /// True nuisances packaged for injection into the estimators.
    pub fn as_nuisances(&self, data: &Dataset, clip_floor: f64) -> Result<NuisanceEstimates> {
        NuisanceEstimates::from_parts(
            data.treatment(),
            self.pi.clone(),
            self.g.clone(),
            self.mu0.clone(),
            self.mu1.clone(),
            None,
            clip_floor,
        )
    }
}

#[derive(Clone, Debug)]
pub struct Draw {
    pub data: Dataset,
    pub truth: TrueEffects,
}

/// Draws `n` rows. With `censor = false` every outcome is observed.
pub fn draw(id: DgpId, n: usize, seed: u64, censor: bool) -> Result<Draw> {
    let p = id.n_covariates();
    let mut rng = seed::rng(seed);
    let mut z = Array2::zeros((n, p));
    let mut treatment = Vec::with_capacity(n);
    let mut observed = Vec::with_capacity(n);
    let mut outcome = Vec::with_capacity(n);
    let mut truth = TrueEffects {
        theta: Vec::with_capacity(n),
        pi: Vec::with_capacity(n),
        g: Vec::with_capacity(n),
        mu0: Vec::with_capacity(n),
        mu1: Vec::with_capacity(n),
    };
    let mut row = vec![0.0; p];
    for i in 0..n {
        for (j, v) in row.iter_mut().enumerate() {
            *v = rng.random_range(-1.0..1.0);
            z[[i, j]] = *v;
        }
        let pi = id.propensity(&row);
        let a = rng.random_bool(pi);
        let g = id.observation(a, &row);
        let c = rng.random_bool(g);
        let (mu0, theta) = (id.mu0(&row), id.theta(&row));
        let y = match id {
            DgpId::NullEffect => ind(rng.random_bool(mu0)),
            _ => {
                let eps: f64 = rng.sample(StandardNormal);
                mu0 + ind(a) * theta + eps
            }
        };
        let c = c || !censor;
        treatment.push(a);
        observed.push(c);
        outcome.push(c.then_some(y));
        truth.theta.push(theta);
        truth.pi.push(pi);
        truth.g.push(if censor { g } else { 1.0 });
        truth.mu0.push(mu0);
        truth.mu1.push(mu0 + theta);
    }
    let names = (1..=p).map(|j| format!("z{j}")).collect();
    let data = Dataset::new(z, treatment, observed, outcome, (0..p).collect())?.with_covariate_names(names)?;
    Ok(Draw { data, truth })
}

/// A training draw with missingness and a fully observed test draw from
/// independent seed streams.
pub fn generate_dgp(id: DgpId, n_train: usize, n_test: usize, seed: u64) -> Result<(Draw, Draw)> {
    let train = draw(id, n_train, seed::derive(seed, &[seed::DATA]), id.has_missingness())?;
    let test = draw(id, n_test, seed::derive(seed, &[seed::TEST_SET]), false)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        let zero = [0.0; 6];
        assert_eq!(DgpId::Dgp1.propensity(&zero), 0.5);
        let z = [0.0, 0.0, 0.6, 0.0, 0.0, 0.0];
        assert_eq!(DgpId::Dgp1.theta(&z), 1.0);
        let g = DgpId::Dgp1.observation(false, &[0.9; 6]);
        assert!((g - 1.0 / (1.0 + (-3.0f64).exp())).abs() < 1e-15);
        assert!((g - 0.952_574_126_822_433_4).abs() < 1e-12);
        // Arm-independent censoring bites the untreated too.
        assert!(DgpId::Dgp2.observation(false, &[0.9; 6]) < 0.5);
    }

    #[test]
    fn consistency_form_places_effect_on_treated() {
        let d = draw(DgpId::Dgp1, 4000, 1, false).unwrap();
        let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..d.data.n() {
            let r = d.data.outcome()[i].unwrap() - d.truth.mu0[i];
            if d.data.treatment()[i] {
                s1 += r - d.truth.theta[i];
                n1 += 1.0;
            } else {
                s0 += r;
                n0 += 1.0;
            }
        }
        assert!((s1 / n1).abs() < 0.06 && (s0 / n0).abs() < 0.06);
    }

    #[test]
    fn test_draw_is_fully_observed_and_deterministic() {
        let (tr, te) = generate_dgp(DgpId::Dgp3, 300, 50, 9).unwrap();
        assert!(te.data.observed().iter().all(|&c| c));
        assert!(tr.data.observed().iter().any(|&c| !c));
        let (tr2, _) = generate_dgp(DgpId::Dgp3, 300, 50, 9).unwrap();
        assert_eq!(tr.data, tr2.data);
    }

    #[test]
    fn null_effect_design_has_no_effect() {
        let d = draw(DgpId::NullEffect, 100, 2, true).unwrap();
        assert!(d.data.observed().iter().all(|&c| c));
        assert!(d.truth.theta.iter().all(|&t| t == 0.0));
        assert!(d.data.outcome().iter().all(|y| matches!(y, Some(v) if *v == 0.0 || *v == 1.0)));
    }
}
