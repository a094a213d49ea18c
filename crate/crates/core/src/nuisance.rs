//! Cross-fitted nuisance estimation: propensity `pi(Z)`, observation
//! probability `G(A, Z)`, and arm-specific outcome surfaces `mu0(Z)`,
//! `mu1(Z)`. Every stored prediction for a row comes from models trained
//! without that row's fold.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FoldAssignment};
use crate::error::{Error, Result};
use crate::learners::{self, ForestParams, LearnerSpec, Task};
use crate::seed;

pub const DEFAULT_CLIP_FLOOR: f64 = 0.01;

/// How `G(A, Z)` is modelled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissingnessModel {
    /// One model with `A` prepended to the features.
    #[default]
    Pooled,
    /// Separate models per treatment arm.
    PerArm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuisanceSpecs {
    #[serde(default = "NuisanceSpecs::default_probability")]
    pub propensity: LearnerSpec,
    #[serde(default = "NuisanceSpecs::default_probability")]
    pub missingness: LearnerSpec,
    #[serde(default = "NuisanceSpecs::default_regression")]
    pub outcome: LearnerSpec,
    #[serde(default = "NuisanceSpecs::default_regression")]
    pub imputation: LearnerSpec,
    #[serde(default)]
    pub missingness_model: MissingnessModel,
}

impl NuisanceSpecs {
    fn forest(mtry: usize) -> LearnerSpec {
        LearnerSpec::RandomForest(ForestParams {
            trees: 100,
            min_node_size: 20,
            mtry: Some(mtry),
            ..ForestParams::default()
        })
    }

    fn default_probability() -> LearnerSpec {
        LearnerSpec::stacked(vec![
            LearnerSpec::Mean,
            LearnerSpec::ridge_logistic(),
            Self::forest(1),
            Self::forest(2),
        ])
    }

    fn default_regression() -> LearnerSpec {
        LearnerSpec::stacked(vec![
            LearnerSpec::Mean,
            LearnerSpec::linear(),
            Self::forest(1),
            Self::forest(2),
        ])
    }

    /// The same learner for every nuisance.
    pub fn uniform(spec: LearnerSpec) -> Self {
        Self {
            propensity: spec.clone(),
            missingness: spec.clone(),
            outcome: spec.clone(),
            imputation: spec,
            missingness_model: MissingnessModel::Pooled,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.propensity.validate()?;
        self.missingness.validate()?;
        self.outcome.validate()?;
        self.imputation.validate()
    }
}

impl Default for NuisanceSpecs {
    fn default() -> Self {
        Self {
            propensity: Self::default_probability(),
            missingness: Self::default_probability(),
            outcome: Self::default_regression(),
            imputation: Self::default_regression(),
            missingness_model: MissingnessModel::Pooled,
        }
    }
}

/// Out-of-fold nuisance predictions, one entry per row.
#[derive(Clone, Debug, PartialEq)]
pub struct NuisanceEstimates {
    pi: Vec<f64>,
    g: Vec<f64>,
    mu0: Vec<f64>,
    mu1: Vec<f64>,
    mu_a: Vec<f64>,
    folds: Option<FoldAssignment>,
    clip_floor: f64,
}

/// Clips a propensity to `[floor, 1 - floor]`.
pub fn clip_propensity(p: f64, floor: f64) -> f64 {
    p.clamp(floor, 1.0 - floor)
}

/// Clips an observation probability from below only: `G` appears solely in
/// denominators, so values near one need no protection.
pub fn clip_observation(g: f64, floor: f64) -> f64 {
    g.clamp(floor, 1.0)
}

impl NuisanceEstimates {
    /// Assembles estimates from given vectors, e.g. true nuisance functions
    /// in a simulation. Probabilities are clipped as in cross-fitting.
    pub fn from_parts(
        treatment: &[bool],
        pi: Vec<f64>,
        g: Vec<f64>,
        mu0: Vec<f64>,
        mu1: Vec<f64>,
        folds: Option<FoldAssignment>,
        clip_floor: f64,
    ) -> Result<Self> {
        let n = treatment.len();
        for (name, v) in [("pi", &pi), ("g", &g), ("mu0", &mu0), ("mu1", &mu1)] {
            if v.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "nuisance `{name}` has {} entries for {n} rows",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument(format!("nuisance `{name}` is not finite")));
            }
        }
        if !(0.0..0.5).contains(&clip_floor) {
            return Err(Error::InvalidArgument(format!(
                "clip_floor must be in [0, 0.5), got {clip_floor}"
            )));
        }
        if let Some(f) = &folds {
            if f.n() != n {
                return Err(Error::InvalidArgument("fold map length differs from data".into()));
            }
        }
        let pi: Vec<f64> = pi.into_iter().map(|p| clip_propensity(p, clip_floor)).collect();
        let g: Vec<f64> = g.into_iter().map(|p| clip_observation(p, clip_floor)).collect();
        if pi.iter().chain(&g).any(|&p| p <= 0.0 || p > 1.0) || pi.iter().any(|&p| p >= 1.0) {
            return Err(Error::InvalidArgument(
                "probabilities must lie strictly inside (0, 1) after clipping".into(),
            ));
        }
        let mu_a = (0..n).map(|i| if treatment[i] { mu1[i] } else { mu0[i] }).collect();
        Ok(Self {
            pi,
            g,
            mu0,
            mu1,
            mu_a,
            folds,
            clip_floor,
        })
    }

    pub fn n(&self) -> usize {
        self.pi.len()
    }
    pub fn pi(&self) -> &[f64] {
        &self.pi
    }
    pub fn g(&self) -> &[f64] {
        &self.g
    }
    pub fn mu0(&self) -> &[f64] {
        &self.mu0
    }
    pub fn mu1(&self) -> &[f64] {
        &self.mu1
    }
    /// `mu^A`: the outcome surface of each row's own arm.
    pub fn mu_a(&self) -> &[f64] {
        &self.mu_a
    }
    pub fn folds(&self) -> Option<&FoldAssignment> {
        self.folds.as_ref()
    }
    pub fn clip_floor(&self) -> f64 {
        self.clip_floor
    }

    /// Row subset in the given order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let pick = |v: &[f64]| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self {
            pi: pick(&self.pi),
            g: pick(&self.g),
            mu0: pick(&self.mu0),
            mu1: pick(&self.mu1),
            mu_a: pick(&self.mu_a),
            folds: None,
            clip_floor: self.clip_floor,
        }
    }

    /// Same estimates with the outcome surfaces replaced.
    pub fn with_outcome_models(&self, treatment: &[bool], mu0: Vec<f64>, mu1: Vec<f64>) -> Self {
        let mu_a = (0..mu0.len()).map(|i| if treatment[i] { mu1[i] } else { mu0[i] }).collect();
        Self {
            mu0,
            mu1,
            mu_a,
            ..self.clone()
        }
    }

    /// Same estimates with `G` set to exactly one, as for fully observed
    /// (e.g. imputed) outcomes.
    pub fn with_unit_observation(&self) -> Self {
        Self {
            g: vec![1.0; self.n()],
            ..self.clone()
        }
    }
}

pub(crate) fn fit_predict(
    spec: &LearnerSpec,
    train_x: ArrayView2<'_, f64>,
    train_y: &[f64],
    task: Task,
    seed: u64,
    test_x: ArrayView2<'_, f64>,
) -> Result<Vec<f64>> {
    learners::fit(spec, train_x, train_y, None, task, seed)?.predict(test_x)
}

fn select(m: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    m.select(Axis(0), rows)
}

struct FoldPredictions {
    rows: Vec<usize>,
    pi: Vec<f64>,
    g: Vec<f64>,
    mu0: Vec<f64>,
    mu1: Vec<f64>,
}

/// Cross-fits arm-specific outcome models on complete cases outside fold `k`
/// and predicts both surfaces for the fold's rows.
fn outcome_fold(
    data: &Dataset,
    z: &Array2<f64>,
    folds: &FoldAssignment,
    k: usize,
    spec: &LearnerSpec,
    seeds: [u64; 2],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let test = select(z, &folds.rows_in(k));
    let outside = folds.rows_outside(k);
    let mut out = [Vec::new(), Vec::new()];
    for arm in 0..2u8 {
        let rows: Vec<usize> = outside
            .iter()
            .copied()
            .filter(|&i| data.observed()[i] && data.treatment()[i] == (arm == 1))
            .collect();
        if rows.is_empty() {
            return Err(Error::EmptyArm { fold: k, arm });
        }
        let y: Vec<f64> = rows.iter().map(|&i| data.outcome()[i].expect("observed")).collect();
        out[arm as usize] = fit_predict(
            spec,
            select(z, &rows).view(),
            &y,
            Task::Regression,
            seed::derive(seeds[arm as usize], &[k as u64]),
            test.view(),
        )?;
    }
    let [mu0, mu1] = out;
    Ok((mu0, mu1))
}

fn missingness_fold(
    data: &Dataset,
    z: &Array2<f64>,
    az: &Array2<f64>,
    folds: &FoldAssignment,
    k: usize,
    specs: &NuisanceSpecs,
    seed: u64,
) -> Result<Vec<f64>> {
    let inside = folds.rows_in(k);
    let outside = folds.rows_outside(k);
    // A fully observed training complement carries no missingness signal;
    // G is one exactly, so the missingness-aware formulas reduce bitwise.
    if outside.iter().all(|&i| data.observed()[i]) {
        return Ok(vec![1.0; inside.len()]);
    }
    let seed = seed::derive(seed, &[seed::MISSINGNESS, k as u64]);
    match specs.missingness_model {
        MissingnessModel::Pooled => {
            let c: Vec<f64> = outside.iter().map(|&i| data.c(i)).collect();
            fit_predict(
                &specs.missingness,
                select(az, &outside).view(),
                &c,
                Task::Probability,
                seed,
                select(az, &inside).view(),
            )
        }
        MissingnessModel::PerArm => {
            let mut g = vec![0.0; inside.len()];
            for arm in [false, true] {
                let train: Vec<usize> =
                    outside.iter().copied().filter(|&i| data.treatment()[i] == arm).collect();
                let pos: Vec<usize> =
                    (0..inside.len()).filter(|&j| data.treatment()[inside[j]] == arm).collect();
                if pos.is_empty() {
                    continue;
                }
                if train.is_empty() {
                    return Err(Error::EmptyArm {
                        fold: k,
                        arm: u8::from(arm),
                    });
                }
                let c: Vec<f64> = train.iter().map(|&i| data.c(i)).collect();
                let test_rows: Vec<usize> = pos.iter().map(|&j| inside[j]).collect();
                let pred = if c.iter().all(|&v| v == 1.0) {
                    vec![1.0; pos.len()]
                } else {
                    fit_predict(
                        &specs.missingness,
                        select(z, &train).view(),
                        &c,
                        Task::Probability,
                        seed::derive(seed, &[u64::from(arm)]),
                        select(z, &test_rows).view(),
                    )?
                };
                for (j, p) in pos.into_iter().zip(pred) {
                    g[j] = p;
                }
            }
            Ok(g)
        }
    }
}

/// Cross-fits all four nuisance functions. `pi` and `G` are trained on every
/// row of the fold complement, the outcome surfaces on its complete cases
/// in the matching arm.
pub fn crossfit_nuisances(
    data: &Dataset,
    folds: &FoldAssignment,
    specs: &NuisanceSpecs,
    clip_floor: f64,
    seed: u64,
) -> Result<NuisanceEstimates> {
    specs.validate()?;
    if folds.n() != data.n() {
        return Err(Error::InvalidArgument(format!(
            "fold map covers {} rows, data has {}",
            folds.n(),
            data.n()
        )));
    }
    let z = data.covariates().to_owned();
    let az = data.treatment_and_covariates();
    let a: Vec<f64> = (0..data.n()).map(|i| data.a(i)).collect();
    let per_fold: Vec<Result<FoldPredictions>> = (0..folds.k())
        .into_par_iter()
        .map(|k| {
            let inside = folds.rows_in(k);
            let outside = folds.rows_outside(k);
            let test = select(&z, &inside);
            let a_train: Vec<f64> = outside.iter().map(|&i| a[i]).collect();
            let pi = fit_predict(
                &specs.propensity,
                select(&z, &outside).view(),
                &a_train,
                Task::Probability,
                seed::derive(seed, &[seed::PROPENSITY, k as u64]),
                test.view(),
            )?;
            let g = missingness_fold(data, &z, &az, folds, k, specs, seed)?;
            let (mu0, mu1) = outcome_fold(
                data,
                &z,
                folds,
                k,
                &specs.outcome,
                [
                    seed::derive(seed, &[seed::OUTCOME0]),
                    seed::derive(seed, &[seed::OUTCOME1]),
                ],
            )?;
            Ok(FoldPredictions {
                rows: inside,
                pi,
                g,
                mu0,
                mu1,
            })
        })
        .collect();
    let n = data.n();
    let (mut pi, mut g, mut mu0, mut mu1) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for fp in per_fold {
        let fp = fp?;
        for (j, &i) in fp.rows.iter().enumerate() {
            pi[i] = fp.pi[j];
            g[i] = fp.g[j];
            mu0[i] = fp.mu0[j];
            mu1[i] = fp.mu1[j];
        }
    }
    NuisanceEstimates::from_parts(data.treatment(), pi, g, mu0, mu1, Some(folds.clone()), clip_floor)
}

/// Completes the outcome vector: observed rows keep `Y`, censored rows get an
/// out-of-fold prediction from a pooled model of `Y` on `(A, Z)` fitted to
/// complete cases.
pub fn fit_imputation_model(
    data: &Dataset,
    folds: &FoldAssignment,
    spec: &LearnerSpec,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut completed: Vec<f64> = data.outcome().iter().map(|y| y.unwrap_or(f64::NAN)).collect();
    if data.observed().iter().all(|&c| c) {
        return Ok(completed);
    }
    let az = data.treatment_and_covariates();
    let parts: Vec<Result<(Vec<usize>, Vec<f64>)>> = (0..folds.k())
        .into_par_iter()
        .map(|k| {
            let targets: Vec<usize> =
                folds.rows_in(k).into_iter().filter(|&i| !data.observed()[i]).collect();
            if targets.is_empty() {
                return Ok((targets, Vec::new()));
            }
            let train: Vec<usize> =
                folds.rows_outside(k).into_iter().filter(|&i| data.observed()[i]).collect();
            if train.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "fold {k}: no complete cases outside the fold to train the imputation model"
                )));
            }
            let y: Vec<f64> = train.iter().map(|&i| data.outcome()[i].expect("observed")).collect();
            let pred = fit_predict(
                spec,
                select(&az, &train).view(),
                &y,
                Task::Regression,
                seed::derive(seed, &[seed::IMPUTATION, k as u64]),
                select(&az, &targets).view(),
            )?;
            Ok((targets, pred))
        })
        .collect();
    for part in parts {
        let (rows, pred) = part?;
        for (i, v) in rows.into_iter().zip(pred) {
            completed[i] = v;
        }
    }
    Ok(completed)
}

/// Nuisances for the imputed-outcome policy: outcome surfaces are refitted by
/// cross-fitting on the completed data, `pi` is shared with `base`, and `G`
/// is one because every outcome is now present.
pub fn imputed_nuisances(
    completed: &Dataset,
    folds: &FoldAssignment,
    specs: &NuisanceSpecs,
    base: &NuisanceEstimates,
    seed: u64,
) -> Result<NuisanceEstimates> {
    let z = completed.covariates().to_owned();
    let parts: Vec<Result<(Vec<usize>, Vec<f64>, Vec<f64>)>> = (0..folds.k())
        .into_par_iter()
        .map(|k| {
            let (mu0, mu1) = outcome_fold(
                completed,
                &z,
                folds,
                k,
                &specs.outcome,
                [
                    seed::derive(seed, &[seed::IMPUTED_OUTCOME0]),
                    seed::derive(seed, &[seed::IMPUTED_OUTCOME1]),
                ],
            )?;
            Ok((folds.rows_in(k), mu0, mu1))
        })
        .collect();
    let n = completed.n();
    let (mut mu0, mut mu1) = (vec![0.0; n], vec![0.0; n]);
    for part in parts {
        let (rows, p0, p1) = part?;
        for (j, i) in rows.into_iter().enumerate() {
            mu0[i] = p0[j];
            mu1[i] = p1[j];
        }
    }
    Ok(base
        .with_outcome_models(completed.treatment(), mu0, mu1)
        .with_unit_observation())
}
