use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fit, Fitted, FittedModel, LearnerSpec, Task, PROBABILITY_CLAMP};
use crate::data::FoldAssignment;
use crate::error::{Error, Result};
use crate::seed;

const MAX_ITER: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StackLoss {
    Squared,
    Log,
}

/// Cross-validated meta-level summary of a stacked ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackReport {
    pub candidates: Vec<String>,
    /// `None` for candidates whose fit failed and were dropped.
    pub cv_losses: Vec<Option<f64>>,
    pub weights: Vec<f64>,
    pub ensemble_cv_loss: f64,
}

impl StackLoss {
    fn pointwise(self, y: f64, p: f64) -> f64 {
        match self {
            StackLoss::Squared => (y - p).powi(2),
            StackLoss::Log => {
                let p = p.clamp(PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            }
        }
    }

    fn derivative(self, y: f64, p: f64) -> f64 {
        match self {
            StackLoss::Squared => 2.0 * (p - y),
            StackLoss::Log => {
                let p = p.clamp(PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP);
                (p - y) / (p * (1.0 - p))
            }
        }
    }
}

struct Objective<'a> {
    preds: &'a Array2<f64>,
    targets: &'a [f64],
    weights: Vec<f64>,
    loss: StackLoss,
}

impl Objective<'_> {
    fn combine(&self, alpha: &[f64], i: usize) -> f64 {
        alpha.iter().enumerate().map(|(c, a)| a * self.preds[[i, c]]).sum()
    }

    fn value(&self, alpha: &[f64]) -> f64 {
        let sw: f64 = self.weights.iter().sum();
        (0..self.targets.len())
            .map(|i| self.weights[i] * self.loss.pointwise(self.targets[i], self.combine(alpha, i)))
            .sum::<f64>()
            / sw
    }

    fn gradient(&self, alpha: &[f64]) -> Vec<f64> {
        let sw: f64 = self.weights.iter().sum();
        let mut g = vec![0.0; alpha.len()];
        for i in 0..self.targets.len() {
            let d = self.weights[i] * self.loss.derivative(self.targets[i], self.combine(alpha, i));
            for (c, gc) in g.iter_mut().enumerate() {
                *gc += d * self.preds[[i, c]];
            }
        }
        g.iter_mut().for_each(|v| *v /= sw);
        g
    }
}

/// Euclidean projection onto the probability simplex.
pub(crate) fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            tau = t;
        }
    }
    v.iter().map(|x| (x - tau).max(0.0)).collect()
}

/// Minimises the objective over the simplex, starting from the vertex of the
/// best single candidate. Every accepted step decreases the objective, so the
/// result is never worse than that candidate.
fn optimise_weights(obj: &Objective<'_>, start: usize, m: usize) -> (Vec<f64>, f64) {
    let mut alpha = vec![0.0; m];
    alpha[start] = 1.0;
    let mut value = obj.value(&alpha);
    let mut step = 1.0;
    for _ in 0..MAX_ITER {
        let g = obj.gradient(&alpha);
        let mut improved = false;
        while step > 1e-12 {
            let trial: Vec<f64> = alpha.iter().zip(&g).map(|(a, g)| a - step * g).collect();
            let cand = project_to_simplex(&trial);
            let v = obj.value(&cand);
            if v < value {
                let gain = value - v;
                alpha = cand;
                value = v;
                improved = gain > 1e-12 * (1.0 + value.abs());
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    (alpha, value)
}

/// Super-learner style stacking: cross-validated predictions of every
/// candidate are combined with nonnegative weights summing to one, chosen to
/// minimise the cross-validated loss. Candidates with zero weight are not
/// refitted.
#[allow(clippy::too_many_arguments)]
pub fn fit_stacked_ensemble(
    candidates: &[LearnerSpec],
    features: ArrayView2<'_, f64>,
    targets: &[f64],
    weights: Option<&[f64]>,
    folds: &FoldAssignment,
    loss: StackLoss,
    task: Task,
    seed: u64,
) -> Result<FittedModel> {
    let n = targets.len();
    let cv: Vec<Option<Vec<f64>>> = candidates
        .par_iter()
        .enumerate()
        .map(|(c, spec)| {
            let mut out = vec![0.0; n];
            for k in 0..folds.k() {
                let train = folds.rows_outside(k);
                let test = folds.rows_in(k);
                let xt = features.select(ndarray::Axis(0), &train);
                let yt: Vec<f64> = train.iter().map(|&i| targets[i]).collect();
                let wt: Option<Vec<f64>> = weights.map(|w| train.iter().map(|&i| w[i]).collect());
                let fitted = fit(spec, xt.view(), &yt, wt.as_deref(), task, seed::derive(seed, &[c as u64, k as u64]))
                    .and_then(|m| m.predict(features.select(ndarray::Axis(0), &test).view()));
                match fitted {
                    Ok(p) => test.iter().zip(p).for_each(|(&i, v)| out[i] = v),
                    Err(e) => {
                        log::warn!("stacking candidate {} dropped: {e}", spec.name());
                        return None;
                    }
                }
            }
            Some(out)
        })
        .collect();
    let alive: Vec<usize> = (0..candidates.len()).filter(|&c| cv[c].is_some()).collect();
    if alive.is_empty() {
        return Err(Error::AllCandidatesFailed);
    }
    let mut preds = Array2::zeros((n, alive.len()));
    for (j, &c) in alive.iter().enumerate() {
        for (i, v) in cv[c].as_ref().unwrap().iter().enumerate() {
            preds[[i, j]] = *v;
        }
    }
    let obj = Objective {
        preds: &preds,
        targets,
        weights: weights.map_or_else(|| vec![1.0; n], <[f64]>::to_vec),
        loss,
    };
    let single: Vec<f64> = (0..alive.len())
        .map(|j| {
            let mut e = vec![0.0; alive.len()];
            e[j] = 1.0;
            obj.value(&e)
        })
        .collect();
    let best = (0..alive.len()).fold(0, |b, j| if single[j] < single[b] { j } else { b });
    let (alpha, ensemble_cv_loss) = optimise_weights(&obj, best, alive.len());

    let mut full_weights = vec![0.0; candidates.len()];
    let mut cv_losses = vec![None; candidates.len()];
    for (j, &c) in alive.iter().enumerate() {
        full_weights[c] = alpha[j];
        cv_losses[c] = Some(single[j]);
    }
    let mut members = Vec::new();
    let mut member_weights = Vec::new();
    for (c, spec) in candidates.iter().enumerate() {
        if full_weights[c] > 0.0 {
            members.push(fit(spec, features, targets, weights, task, seed::derive(seed, &[c as u64]))?);
            member_weights.push(full_weights[c]);
        }
    }
    let report = StackReport {
        candidates: candidates.iter().map(|s| s.name().to_string()).collect(),
        cv_losses,
        weights: full_weights,
        ensemble_cv_loss,
    };
    Ok(FittedModel {
        dim: features.ncols(),
        task,
        inner: Fitted::Stacked {
            members,
            weights: member_weights,
            report,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::assign_folds;
    use proptest::prelude::*;

    #[test]
    fn simplex_projection_examples() {
        assert_eq!(project_to_simplex(&[0.2, 0.8]), vec![0.2, 0.8]);
        assert_eq!(project_to_simplex(&[2.0, 0.0]), vec![1.0, 0.0]);
        let p = project_to_simplex(&[1.0, 1.0]);
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn projection_lands_on_simplex(v in proptest::collection::vec(-3.0f64..3.0, 1..6)) {
            let p = project_to_simplex(&v);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_not_worse_than_best_candidate() {
        let n = 200;
        let x = Array2::from_shape_fn((n, 1), |(i, _)| i as f64 / n as f64);
        let y: Vec<f64> = (0..n).map(|i| 3.0 * (i as f64 / n as f64) + ((i * 37) % 11) as f64 / 11.0).collect();
        let folds = assign_folds(n, 5, 1).unwrap();
        let cands = vec![LearnerSpec::Mean, LearnerSpec::linear(), LearnerSpec::knn(5)];
        let m = fit_stacked_ensemble(&cands, x.view(), &y, None, &folds, StackLoss::Squared, Task::Regression, 3)
            .unwrap();
        let r = m.stack_report().unwrap();
        let best = r.cv_losses.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        assert!(r.ensemble_cv_loss <= best);
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(r.weights.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn failing_candidate_is_dropped() {
        let n = 60;
        let x = Array2::from_shape_fn((n, 1), |(i, _)| i as f64);
        let y: Vec<f64> = (0..n).map(|i| i as f64 * 0.5).collect();
        let folds = assign_folds(n, 3, 1).unwrap();
        // ridge-logistic rejects regression tasks.
        let cands = vec![LearnerSpec::ridge_logistic(), LearnerSpec::linear()];
        let m = fit_stacked_ensemble(&cands, x.view(), &y, None, &folds, StackLoss::Squared, Task::Regression, 3)
            .unwrap();
        let r = m.stack_report().unwrap();
        assert_eq!(r.cv_losses[0], None);
        assert_eq!(r.weights, vec![0.0, 1.0]);
    }
}
