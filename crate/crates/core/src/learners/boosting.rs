use ndarray::ArrayView2;

use super::binning::BinnedMatrix;
use super::{weighted_mean, BoostParams, Task, PROBABILITY_CLAMP};
use crate::stats::{expit, logit};

/// L2 regularisation on stump leaf values, in units of hessian mass.
const LEAF_PENALTY: f64 = 1.0;

#[derive(Clone, Copy, Debug)]
struct Stump {
    feature: usize,
    threshold: f64,
    left: f64,
    right: f64,
}

/// Gradient-boosted depth-one trees. Squared loss for regression, logistic
/// loss for probability targets, with Newton leaf values.
#[derive(Clone, Debug)]
pub struct BoostedStumps {
    base: f64,
    stumps: Vec<Stump>,
    logistic: bool,
}

impl BoostedStumps {
    pub fn fit(
        features: ArrayView2<'_, f64>,
        targets: &[f64],
        weights: Option<&[f64]>,
        params: &BoostParams,
        task: Task,
    ) -> Self {
        let n = targets.len();
        let logistic = task == Task::Probability;
        let binned = BinnedMatrix::new(features, params.bins);
        let w = |i: usize| weights.map_or(1.0, |w| w[i]);
        let m = weighted_mean(targets, weights);
        let base = if logistic {
            logit(m.clamp(PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP))
        } else {
            m
        };
        let mut score = vec![base; n];
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n];
        let mut hg = vec![0.0; 256];
        let mut hh = vec![0.0; 256];
        let mut stumps = Vec::with_capacity(params.rounds);
        for _ in 0..params.rounds {
            for i in 0..n {
                let (g, h) = if logistic {
                    let p = expit(score[i]);
                    (p - targets[i], (p * (1.0 - p)).max(1e-12))
                } else {
                    (score[i] - targets[i], 1.0)
                };
                grad[i] = w(i) * g;
                hess[i] = w(i) * h;
            }
            let gt: f64 = grad.iter().sum();
            let ht: f64 = hess.iter().sum();
            let parent = gt * gt / (ht + LEAF_PENALTY);
            let mut best: Option<(f64, usize, usize, f64, f64)> = None;
            for f in 0..binned.n_features() {
                let nb = binned.n_bins(f);
                if nb < 2 {
                    continue;
                }
                hg[..nb].fill(0.0);
                hh[..nb].fill(0.0);
                for (i, &c) in binned.column(f).iter().enumerate() {
                    hg[c as usize] += grad[i];
                    hh[c as usize] += hess[i];
                }
                let (mut lg, mut lh) = (0.0, 0.0);
                for b in 0..nb - 1 {
                    lg += hg[b];
                    lh += hh[b];
                    let (rg, rh) = (gt - lg, ht - lh);
                    if lh <= 0.0 || rh <= 0.0 {
                        continue;
                    }
                    let gain = lg * lg / (lh + LEAF_PENALTY) + rg * rg / (rh + LEAF_PENALTY) - parent;
                    if best.is_none_or(|(g, ..)| gain > g) {
                        best = Some((gain, f, b, lg / (lh + LEAF_PENALTY), rg / (rh + LEAF_PENALTY)));
                    }
                }
            }
            let Some((gain, f, b, lstep, rstep)) = best else {
                break;
            };
            if gain <= 1e-12 * parent.abs().max(1e-12) {
                break;
            }
            let stump = Stump {
                feature: f,
                threshold: binned.threshold(f, b),
                left: -params.learning_rate * lstep,
                right: -params.learning_rate * rstep,
            };
            for (i, &c) in binned.column(f).iter().enumerate() {
                score[i] += if (c as usize) <= b { stump.left } else { stump.right };
            }
            stumps.push(stump);
        }
        Self {
            base,
            stumps,
            logistic,
        }
    }

    pub fn n_stumps(&self) -> usize {
        self.stumps.len()
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        x.rows()
            .into_iter()
            .map(|row| {
                let s = self.base
                    + self
                        .stumps
                        .iter()
                        .map(|st| if row[st.feature] <= st.threshold { st.left } else { st.right })
                        .sum::<f64>();
                if self.logistic {
                    expit(s)
                } else {
                    s
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn fits_additive_step_signal() {
        let n = 400;
        let mut x = Array2::zeros((n, 2));
        let mut y = vec![0.0; n];
        for i in 0..n {
            x[[i, 0]] = (i % 20) as f64 / 20.0;
            x[[i, 1]] = (i / 20) as f64 / 20.0;
            y[i] = if x[[i, 0]] > 0.5 { 1.0 } else { 0.0 } + if x[[i, 1]] > 0.3 { 2.0 } else { 0.0 };
        }
        let params = BoostParams {
            rounds: 300,
            learning_rate: 0.3,
            ..BoostParams::default()
        };
        let m = BoostedStumps::fit(x.view(), &y, None, &params, Task::Regression);
        let mse: f64 = m.predict(x.view()).iter().zip(&y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n as f64;
        assert!(mse < 0.01, "mse {mse}");
    }

    #[test]
    fn probability_predictions_in_unit_interval() {
        let x = Array2::from_shape_fn((50, 1), |(i, _)| i as f64);
        let y: Vec<f64> = (0..50).map(|i| f64::from(u8::from(i >= 25))).collect();
        let m = BoostedStumps::fit(x.view(), &y, None, &BoostParams::default(), Task::Probability);
        let p = m.predict(x.view());
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(p[0] < 0.2 && p[49] > 0.8);
    }

    #[test]
    fn constant_target_stops_early() {
        let x = Array2::from_shape_fn((30, 1), |(i, _)| i as f64);
        let m = BoostedStumps::fit(x.view(), &[2.0; 30], None, &BoostParams::default(), Task::Regression);
        assert_eq!(m.n_stumps(), 0);
        assert!(m.predict(x.view()).iter().all(|&v| v == 2.0));
    }
}
