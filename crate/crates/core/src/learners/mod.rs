//! Regression and probability learners used for nuisance estimation and for
//! the stage-two pseudo-outcome regression.
//!
//! All learners are implemented in-crate so that fits are deterministic
//! given a seed: the same spec, seed and data always yield bitwise-identical
//! predictions.

mod binning;
mod boosting;
mod forest;
mod knn;
mod linear;
mod logistic;
mod stacking;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use boosting::BoostedStumps;
pub use forest::Forest;
pub use knn::Knn;
pub use linear::{weighted_least_squares, LinearModel, WlsSolution};
pub use logistic::LogisticModel;
pub use stacking::{fit_stacked_ensemble, StackLoss, StackReport};

/// Probability outputs are kept strictly inside `(0, 1)` by this margin.
pub const PROBABILITY_CLAMP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Regression,
    Probability,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestParams {
    #[serde(default = "ForestParams::default_trees")]
    pub trees: usize,
    /// Nodes with at most this many (bootstrap) samples are not split.
    #[serde(default = "ForestParams::default_min_node_size")]
    pub min_node_size: usize,
    /// Features tried per split; `floor(sqrt(p))` when absent.
    #[serde(default)]
    pub mtry: Option<usize>,
    /// Maximum number of histogram bins per feature.
    #[serde(default = "ForestParams::default_bins")]
    pub bins: usize,
}

impl ForestParams {
    fn default_trees() -> usize {
        500
    }
    fn default_min_node_size() -> usize {
        10
    }
    fn default_bins() -> usize {
        64
    }
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            trees: Self::default_trees(),
            min_node_size: Self::default_min_node_size(),
            mtry: None,
            bins: Self::default_bins(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoostParams {
    #[serde(default = "BoostParams::default_rounds")]
    pub rounds: usize,
    #[serde(default = "BoostParams::default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "BoostParams::default_bins")]
    pub bins: usize,
}

impl BoostParams {
    fn default_rounds() -> usize {
        100
    }
    fn default_learning_rate() -> f64 {
        0.1
    }
    fn default_bins() -> usize {
        64
    }
}

impl Default for BoostParams {
    fn default() -> Self {
        Self {
            rounds: Self::default_rounds(),
            learning_rate: Self::default_learning_rate(),
            bins: Self::default_bins(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackParams {
    pub candidates: Vec<LearnerSpec>,
    /// Meta-level loss; log loss for probability tasks and squared loss for
    /// regression when absent.
    #[serde(default)]
    pub loss: Option<StackLoss>,
    #[serde(default = "StackParams::default_folds")]
    pub folds: usize,
}

impl StackParams {
    fn default_folds() -> usize {
        5
    }
}

/// Learner kind plus hyperparameters. Serialized with a `kind` tag, e.g.
/// `{"kind": "random-forest", "trees": 200}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LearnerSpec {
    Mean,
    Linear {
        #[serde(default)]
        ridge: f64,
    },
    RidgeLogistic {
        #[serde(default = "default_logistic_penalty")]
        penalty: f64,
    },
    Knn {
        #[serde(default = "default_k")]
        k: usize,
    },
    RandomForest(ForestParams),
    BoostedStumps(BoostParams),
    StackedEnsemble(StackParams),
}

fn default_logistic_penalty() -> f64 {
    1e-3
}

fn default_k() -> usize {
    10
}

impl LearnerSpec {
    pub fn linear() -> Self {
        LearnerSpec::Linear { ridge: 0.0 }
    }

    pub fn ridge_logistic() -> Self {
        LearnerSpec::RidgeLogistic {
            penalty: default_logistic_penalty(),
        }
    }

    pub fn knn(k: usize) -> Self {
        LearnerSpec::Knn { k }
    }

    pub fn forest(trees: usize, min_node_size: usize) -> Self {
        LearnerSpec::RandomForest(ForestParams {
            trees,
            min_node_size,
            ..ForestParams::default()
        })
    }

    pub fn stacked(candidates: Vec<LearnerSpec>) -> Self {
        LearnerSpec::StackedEnsemble(StackParams {
            candidates,
            loss: None,
            folds: StackParams::default_folds(),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LearnerSpec::Mean => "mean",
            LearnerSpec::Linear { .. } => "linear",
            LearnerSpec::RidgeLogistic { .. } => "ridge-logistic",
            LearnerSpec::Knn { .. } => "knn",
            LearnerSpec::RandomForest(_) => "random-forest",
            LearnerSpec::BoostedStumps(_) => "boosted-stumps",
            LearnerSpec::StackedEnsemble(_) => "stacked-ensemble",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("{}: {msg}", self.name())));
        match self {
            LearnerSpec::Mean => Ok(()),
            LearnerSpec::Linear { ridge } if !(*ridge >= 0.0 && ridge.is_finite()) => {
                bad(format!("ridge must be a nonnegative number, got {ridge}"))
            }
            LearnerSpec::Linear { .. } => Ok(()),
            LearnerSpec::RidgeLogistic { penalty } if !(*penalty >= 0.0 && penalty.is_finite()) => {
                bad(format!("penalty must be a nonnegative number, got {penalty}"))
            }
            LearnerSpec::RidgeLogistic { .. } => Ok(()),
            LearnerSpec::Knn { k } if *k == 0 => bad("k must be at least 1".into()),
            LearnerSpec::Knn { .. } => Ok(()),
            LearnerSpec::RandomForest(p) => {
                if p.trees == 0 {
                    bad("trees must be at least 1".into())
                } else if p.min_node_size == 0 {
                    bad("min_node_size must be at least 1".into())
                } else if p.mtry == Some(0) {
                    bad("mtry must be at least 1".into())
                } else if !(2..=256).contains(&p.bins) {
                    bad(format!("bins must be in 2..=256, got {}", p.bins))
                } else {
                    Ok(())
                }
            }
            LearnerSpec::BoostedStumps(p) => {
                if p.rounds == 0 {
                    bad("rounds must be at least 1".into())
                } else if !(p.learning_rate > 0.0 && p.learning_rate <= 1.0) {
                    bad(format!("learning_rate must be in (0, 1], got {}", p.learning_rate))
                } else if !(2..=256).contains(&p.bins) {
                    bad(format!("bins must be in 2..=256, got {}", p.bins))
                } else {
                    Ok(())
                }
            }
            LearnerSpec::StackedEnsemble(p) => {
                if p.candidates.len() < 2 {
                    return bad("needs at least two candidates".into());
                }
                if p.folds < 2 {
                    return bad("folds must be at least 2".into());
                }
                p.candidates.iter().try_for_each(LearnerSpec::validate)
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Fitted {
    Constant(f64),
    Linear(LinearModel),
    Logistic(LogisticModel),
    Knn(Knn),
    Forest(Forest),
    Boosted(BoostedStumps),
    Stacked {
        members: Vec<FittedModel>,
        weights: Vec<f64>,
        report: StackReport,
    },
}

/// A fitted learner. Prediction is read-only and reentrant.
#[derive(Clone, Debug)]
pub struct FittedModel {
    dim: usize,
    task: Task,
    inner: Fitted,
}

impl FittedModel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn task(&self) -> Task {
        self.task
    }

    /// Meta-level details when this is a stacked ensemble.
    pub fn stack_report(&self) -> Option<&StackReport> {
        match &self.inner {
            Fitted::Stacked { report, .. } => Some(report),
            _ => None,
        }
    }

    pub fn predict(&self, features: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        if features.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: features.ncols(),
            });
        }
        let mut out = self.predict_raw(features);
        if self.task == Task::Probability {
            for p in &mut out {
                *p = p.clamp(PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP);
            }
        }
        Ok(out)
    }

    fn predict_raw(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        match &self.inner {
            Fitted::Constant(c) => vec![*c; x.nrows()],
            Fitted::Linear(m) => m.predict(x),
            Fitted::Logistic(m) => m.predict(x),
            Fitted::Knn(m) => m.predict(x),
            Fitted::Forest(m) => m.predict(x),
            Fitted::Boosted(m) => m.predict(x),
            Fitted::Stacked {
                members, weights, ..
            } => {
                let mut out = vec![0.0; x.nrows()];
                for (m, &w) in members.iter().zip(weights) {
                    // Member outputs are already clamped for probability tasks.
                    let p = m.predict(x).expect("member dimension checked at fit");
                    for (o, v) in out.iter_mut().zip(p) {
                        *o += w * v;
                    }
                }
                out
            }
        }
    }
}

fn check_inputs(
    features: ArrayView2<'_, f64>,
    targets: &[f64],
    weights: Option<&[f64]>,
    task: Task,
) -> Result<()> {
    let n = features.nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot fit a learner on empty data".into()));
    }
    if targets.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} targets for {n} feature rows",
            targets.len()
        )));
    }
    if targets.iter().any(|t| !t.is_finite()) || features.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite training data".into()));
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::InvalidArgument(format!("{} weights for {n} rows", w.len())));
        }
        if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidArgument("all weights are zero".into()));
        }
    }
    if task == Task::Probability && targets.iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::InvalidArgument(
            "probability task requires 0/1 targets".into(),
        ));
    }
    Ok(())
}

pub(crate) fn weighted_mean(targets: &[f64], weights: Option<&[f64]>) -> f64 {
    match weights {
        None => targets.iter().sum::<f64>() / targets.len() as f64,
        Some(w) => {
            let sw: f64 = w.iter().sum();
            targets.iter().zip(w).map(|(t, w)| t * w).sum::<f64>() / sw
        }
    }
}

/// Fits `spec` to `(features, targets)` with optional observation weights.
/// Deterministic given `(spec, seed, data)`.
pub fn fit(
    spec: &LearnerSpec,
    features: ArrayView2<'_, f64>,
    targets: &[f64],
    weights: Option<&[f64]>,
    task: Task,
    seed: u64,
) -> Result<FittedModel> {
    spec.validate()?;
    check_inputs(features, targets, weights, task)?;
    let dim = features.ncols();
    let inner = match spec {
        LearnerSpec::Mean => Fitted::Constant(weighted_mean(targets, weights)),
        LearnerSpec::Linear { ridge } => {
            Fitted::Linear(LinearModel::fit(features, targets, weights, *ridge)?)
        }
        LearnerSpec::RidgeLogistic { penalty } => {
            if task != Task::Probability {
                return Err(Error::Config(
                    "ridge-logistic is only defined for probability tasks".into(),
                ));
            }
            Fitted::Logistic(LogisticModel::fit(features, targets, weights, *penalty)?)
        }
        LearnerSpec::Knn { k } => Fitted::Knn(Knn::fit(features, targets, weights, *k)),
        LearnerSpec::RandomForest(p) => {
            Fitted::Forest(Forest::fit(features, targets, weights, p, seed))
        }
        LearnerSpec::BoostedStumps(p) => {
            Fitted::Boosted(BoostedStumps::fit(features, targets, weights, p, task))
        }
        LearnerSpec::StackedEnsemble(p) => {
            let k = p.folds.min(features.nrows());
            if k < 2 {
                return Err(Error::InvalidArgument(
                    "stacked ensemble needs at least two rows".into(),
                ));
            }
            let folds = crate::data::assign_folds(
                features.nrows(),
                k,
                crate::seed::derive(seed, &[crate::seed::FOLDS]),
            )?;
            let loss = p.loss.unwrap_or(match task {
                Task::Probability => StackLoss::Log,
                Task::Regression => StackLoss::Squared,
            });
            return fit_stacked_ensemble(
                &p.candidates,
                features,
                targets,
                weights,
                &folds,
                loss,
                task,
                seed,
            );
        }
    };
    Ok(FittedModel { dim, task, inner })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn mean_learner_predicts_sample_mean() {
        let x = Array2::zeros((3, 1));
        let m = fit(&LearnerSpec::Mean, x.view(), &[1.0, 2.0, 3.0], None, Task::Regression, 0)
            .unwrap();
        assert_eq!(m.predict(array![[5.0], [-1.0]].view()).unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn probability_outputs_are_clamped() {
        let x = Array2::zeros((4, 1));
        let m = fit(&LearnerSpec::Mean, x.view(), &[1.0; 4], None, Task::Probability, 0).unwrap();
        assert_eq!(m.predict(x.view()).unwrap()[0], 1.0 - PROBABILITY_CLAMP);
    }

    #[test]
    fn empty_data_is_an_error() {
        let x = Array2::<f64>::zeros((0, 2));
        assert!(fit(&LearnerSpec::Mean, x.view(), &[], None, Task::Regression, 0).is_err());
    }

    #[test]
    fn probability_task_requires_binary_targets() {
        let x = Array2::zeros((2, 1));
        let err = fit(&LearnerSpec::Mean, x.view(), &[0.5, 1.0], None, Task::Probability, 0);
        assert!(err.is_err());
    }

    #[test]
    fn dimension_mismatch_on_predict() {
        let x = Array2::zeros((3, 2));
        let m = fit(&LearnerSpec::Mean, x.view(), &[1.0; 3], None, Task::Regression, 0).unwrap();
        assert!(matches!(
            m.predict(Array2::zeros((1, 3)).view()),
            Err(Error::DimensionMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn spec_json_round_trip_and_validation() {
        let json = r#"{"kind":"stacked-ensemble","candidates":[{"kind":"mean"},{"kind":"random-forest","trees":50}]}"#;
        let spec: LearnerSpec = serde_json::from_str(json).unwrap();
        spec.validate().unwrap();
        let back: LearnerSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(spec, back);

        let one: LearnerSpec =
            serde_json::from_str(r#"{"kind":"stacked-ensemble","candidates":[{"kind":"mean"}]}"#)
                .unwrap();
        assert!(one.validate().is_err());
        assert!(serde_json::from_str::<LearnerSpec>(r#"{"kind":"random-forest","tres":5}"#).is_err());
    }
}
