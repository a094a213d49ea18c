//! Sieve-based targeting of the outcome surfaces for the EP family.
//!
//! The fluctuation is `mu1* = mu1 + phi(X) eps`, `mu0* = mu0 - phi(X) eps`,
//! so on each row `mu^A* = mu^A + (2A - 1) phi(X) eps`. The coefficient
//! `eps` is therefore fitted by weighted least squares of `Y` on the signed
//! design `(2A - 1) phi(X)` with offset `mu^A`, which makes the weighted
//! residuals of the updated fit orthogonal to that design.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::learners::weighted_least_squares;
use crate::nuisance::NuisanceEstimates;
use crate::pseudo::{PseudoKind, PseudoOutcomes};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SieveConfig {
    /// Cosine terms per covariate; `min(10, ceil(n^(1/4)))` when absent.
    #[serde(default)]
    pub degree: Option<usize>,
    /// 1 for additive terms only, 2 to add pairwise products of the first
    /// cosine terms when `X` has at most four columns.
    #[serde(default = "SieveConfig::default_interaction_order")]
    pub interaction_order: usize,
}

impl SieveConfig {
    fn default_interaction_order() -> usize {
        2
    }

    pub fn degree_for(&self, n: usize) -> usize {
        self.degree.unwrap_or_else(|| default_degree(n))
    }
}

impl Default for SieveConfig {
    fn default() -> Self {
        Self {
            degree: None,
            interaction_order: Self::default_interaction_order(),
        }
    }
}

pub fn default_degree(n: usize) -> usize {
    ((n as f64).powf(0.25).ceil() as usize).clamp(1, 10)
}

/// Tensor-free cosine basis with training-frozen rescaling bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SieveBasis {
    lower: Vec<f64>,
    upper: Vec<f64>,
    degree: usize,
    interactions: bool,
}

pub fn build_sieve(x: ArrayView2<'_, f64>, degree: usize, interaction_order: usize) -> Result<SieveBasis> {
    if degree == 0 {
        return Err(Error::InvalidArgument("sieve degree must be at least 1".into()));
    }
    if !(1..=2).contains(&interaction_order) {
        return Err(Error::InvalidArgument(format!(
            "interaction order must be 1 or 2, got {interaction_order}"
        )));
    }
    if x.nrows() == 0 || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("sieve needs finite, nonempty data".into()));
    }
    let p = x.ncols();
    let mut lower = Vec::with_capacity(p);
    let mut upper = Vec::with_capacity(p);
    for (j, col) in x.columns().into_iter().enumerate() {
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lo == hi {
            log::warn!("sieve: covariate column {j} is constant; its terms are zero");
        }
        lower.push(lo);
        upper.push(hi);
    }
    Ok(SieveBasis {
        lower,
        upper,
        degree,
        interactions: interaction_order == 2 && p <= 4,
    })
}

impl SieveBasis {
    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn input_dim(&self) -> usize {
        self.lower.len()
    }

    /// Number of basis columns including the intercept.
    pub fn dim(&self) -> usize {
        let p = self.input_dim();
        1 + p * self.degree + if self.interactions { p * (p - 1) / 2 } else { 0 }
    }

    fn rescale(&self, j: usize, v: f64) -> Option<f64> {
        let (lo, hi) = (self.lower[j], self.upper[j]);
        (hi > lo).then(|| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
    }

    pub fn evaluate(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let p = self.input_dim();
        if x.ncols() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: x.ncols(),
            });
        }
        let d = self.degree;
        let mut out = Array2::zeros((x.nrows(), self.dim()));
        for (i, row) in x.rows().into_iter().enumerate() {
            out[[i, 0]] = 1.0;
            for j in 0..p {
                if let Some(u) = self.rescale(j, row[j]) {
                    for k in 1..=d {
                        out[[i, 1 + j * d + k - 1]] = (k as f64 * PI * u).cos();
                    }
                }
            }
            if self.interactions {
                let mut col = 1 + p * d;
                for j in 0..p {
                    for l in j + 1..p {
                        out[[i, col]] = out[[i, 1 + j * d]] * out[[i, 1 + l * d]];
                        col += 1;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Targeting weights. Without missingness awareness
/// `H = A/pi + (1-A)/(1-pi)`; with it `H = CA/(G pi) + C(1-A)/(G(1-pi))`.
pub fn ep_weights(data: &Dataset, nuis: &NuisanceEstimates, missing_aware: bool) -> Vec<f64> {
    let (pi, g) = (nuis.pi(), nuis.g());
    (0..data.n())
        .map(|i| {
            let a = data.a(i);
            if missing_aware {
                let c = data.c(i);
                c * a / (g[i] * pi[i]) + c * (1.0 - a) / (g[i] * (1.0 - pi[i]))
            } else {
                a / pi[i] + (1.0 - a) / (1.0 - pi[i])
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetedOutcomes {
    pub mu0_star: Vec<f64>,
    pub mu1_star: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub weights: Vec<f64>,
}

fn signed(a: bool) -> f64 {
    if a {
        1.0
    } else {
        -1.0
    }
}

/// Fits `eps` on rows where `outcomes` is present and applies the update to
/// every row. `phi` is the basis evaluated on all rows.
pub fn itmle_update(
    treatment: &[bool],
    outcomes: &[Option<f64>],
    nuis: &NuisanceEstimates,
    phi: ArrayView2<'_, f64>,
    weights: &[f64],
) -> Result<TargetedOutcomes> {
    let n = treatment.len();
    if outcomes.len() != n || nuis.n() != n || phi.nrows() != n || weights.len() != n {
        return Err(Error::InvalidArgument("targeting inputs have inconsistent lengths".into()));
    }
    if weights.iter().any(|&h| !(h >= 0.0 && h.is_finite())) {
        return Err(Error::InvalidArgument("targeting weights must be finite and nonnegative".into()));
    }
    let rows: Vec<usize> = (0..n).filter(|&i| outcomes[i].is_some() && weights[i] > 0.0).collect();
    if rows.is_empty() {
        return Err(Error::NoEffectiveObservations);
    }
    let q = phi.ncols();
    let mut design = Array2::zeros((rows.len(), q));
    for (r, &i) in rows.iter().enumerate() {
        let s = signed(treatment[i]);
        for k in 0..q {
            design[[r, k]] = s * phi[[i, k]];
        }
    }
    let y: Vec<f64> = rows.iter().map(|&i| outcomes[i].unwrap()).collect();
    let w: Vec<f64> = rows.iter().map(|&i| weights[i]).collect();
    let off: Vec<f64> = rows.iter().map(|&i| nuis.mu_a()[i]).collect();
    let epsilon = weighted_least_squares(design.view(), &y, &w, &off)?.coefficients;
    let shift: Vec<f64> = phi
        .rows()
        .into_iter()
        .map(|row| row.iter().zip(&epsilon).map(|(p, e)| p * e).sum())
        .collect();
    Ok(TargetedOutcomes {
        mu0_star: nuis.mu0().iter().zip(&shift).map(|(m, s)| m - s).collect(),
        mu1_star: nuis.mu1().iter().zip(&shift).map(|(m, s)| m + s).collect(),
        epsilon,
        weights: weights.to_vec(),
    })
}

/// Plug-in contrast of the targeted surfaces, defined on every row.
pub fn ep_pseudo(targeted: &TargetedOutcomes, kind: PseudoKind) -> PseudoOutcomes {
    let values = targeted
        .mu1_star
        .iter()
        .zip(&targeted.mu0_star)
        .map(|(m1, m0)| m1 - m0)
        .collect();
    PseudoOutcomes::all(kind, values)
}

/// Normal-equation check after targeting. Returns the largest
/// `|sum_i H_i (2A_i - 1)(Y_i - mu^A*_i) phi_k(X_i)|` over basis columns and
/// the scale `sum_i H_i |Y_i - mu^A_i| + 1` over the regression rows.
pub fn orthogonality(
    treatment: &[bool],
    outcomes: &[Option<f64>],
    nuis: &NuisanceEstimates,
    phi: ArrayView2<'_, f64>,
    targeted: &TargetedOutcomes,
) -> (f64, f64) {
    let q = phi.ncols();
    let mut sums = vec![0.0; q];
    let mut scale = 1.0;
    for i in 0..treatment.len() {
        let (Some(y), h) = (outcomes[i], targeted.weights[i]) else {
            continue;
        };
        if h == 0.0 {
            continue;
        }
        let star = if treatment[i] {
            targeted.mu1_star[i]
        } else {
            targeted.mu0_star[i]
        };
        let r = h * signed(treatment[i]) * (y - star);
        for (k, s) in sums.iter_mut().enumerate() {
            *s += r * phi[[i, k]];
        }
        scale += h * (y - nuis.mu_a()[i]).abs();
    }
    (sums.iter().fold(0.0, |m, s| m.max(s.abs())), scale)
}
