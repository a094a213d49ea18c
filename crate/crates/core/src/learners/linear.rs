use nalgebra::{DMatrix, DVector};
use ndarray::ArrayView2;

use crate::error::{Error, Result};

/// Relative singular-value cutoff below which a direction is treated as
/// rank-deficient.
const RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct WlsSolution {
    pub coefficients: Vec<f64>,
    pub rank: usize,
    /// Set when the weighted design was rank-deficient and the minimum-norm
    /// solution was returned.
    pub rank_deficient: bool,
}

/// Minimises `sum_i w_i (y_i - offset_i - design_i . beta)^2`.
///
/// Zero-weight rows are dropped. The solve goes through an SVD of the
/// row-scaled design, which yields the minimum-norm minimiser when the
/// design is rank-deficient, followed by one step of iterative refinement.
pub fn weighted_least_squares(
    design: ArrayView2<'_, f64>,
    response: &[f64],
    weights: &[f64],
    offset: &[f64],
) -> Result<WlsSolution> {
    let (n, q) = design.dim();
    if response.len() != n || weights.len() != n || offset.len() != n {
        return Err(Error::InvalidArgument(format!(
            "weighted least squares: design has {n} rows but response/weights/offset have {}/{}/{}",
            response.len(),
            weights.len(),
            offset.len()
        )));
    }
    if q == 0 {
        return Err(Error::InvalidArgument("design has no columns".into()));
    }
    if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
        return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
    }
    let rows: Vec<usize> = (0..n).filter(|&i| weights[i] > 0.0).collect();
    if rows.is_empty() {
        return Err(Error::InvalidArgument("all weights are zero".into()));
    }
    let m = rows.len();
    let mut a = DMatrix::<f64>::zeros(m, q);
    let mut b = DVector::<f64>::zeros(m);
    for (r, &i) in rows.iter().enumerate() {
        let sw = weights[i].sqrt();
        for j in 0..q {
            a[(r, j)] = sw * design[[i, j]];
        }
        b[r] = sw * (response[i] - offset[i]);
    }
    if a.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite design or response".into()));
    }
    let (coef, rank) = min_norm_solve(&a, &b)?;
    Ok(WlsSolution {
        coefficients: coef.iter().copied().collect(),
        rank,
        rank_deficient: rank < q,
    })
}

fn min_norm_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, usize)> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = smax * RANK_TOL;
    let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
    let solve = |rhs: &DVector<f64>| -> Result<DVector<f64>> {
        svd.solve(rhs, cutoff)
            .map_err(|e| Error::Numerical(format!("least-squares solve failed: {e}")))
    };
    let mut x = solve(b)?;
    // One refinement step tightens the normal-equation residual.
    let r = b - a * &x;
    x += solve(&r)?;
    Ok((x, rank))
}

/// Least-squares linear model with intercept and optional ridge penalty on
/// the slopes.
#[derive(Clone, Debug)]
pub struct LinearModel {
    intercept: f64,
    slopes: Vec<f64>,
}

impl LinearModel {
    pub fn fit(
        features: ArrayView2<'_, f64>,
        targets: &[f64],
        weights: Option<&[f64]>,
        ridge: f64,
    ) -> Result<Self> {
        let (n, p) = features.dim();
        let extra = if ridge > 0.0 { p } else { 0 };
        let mut design = ndarray::Array2::<f64>::zeros((n + extra, p + 1));
        let mut response = vec![0.0; n + extra];
        let mut w = vec![1.0; n + extra];
        for i in 0..n {
            design[[i, 0]] = 1.0;
            for j in 0..p {
                design[[i, j + 1]] = features[[i, j]];
            }
            response[i] = targets[i];
            if let Some(ws) = weights {
                w[i] = ws[i];
            }
        }
        // Ridge as augmented pseudo-rows: sqrt(ridge) * e_j with zero response.
        for j in 0..extra {
            design[[n + j, j + 1]] = ridge.sqrt();
        }
        let offset = vec![0.0; n + extra];
        let sol = weighted_least_squares(design.view(), &response, &w, &offset)?;
        Ok(Self {
            intercept: sol.coefficients[0],
            slopes: sol.coefficients[1..].to_vec(),
        })
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        x.rows()
            .into_iter()
            .map(|row| {
                self.intercept + row.iter().zip(&self.slopes).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn coefficients(&self) -> (f64, &[f64]) {
        (self.intercept, &self.slopes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    #[test]
    fn intercept_only_is_weighted_mean() {
        let d = Array2::ones((2, 1));
        let s = weighted_least_squares(d.view(), &[1.0, 3.0], &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert!((s.coefficients[0] - 2.0).abs() < 1e-14);
        let s = weighted_least_squares(d.view(), &[0.0, 4.0], &[1.0, 3.0], &[0.0, 0.0]).unwrap();
        assert!((s.coefficients[0] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn response_equal_to_offset_gives_zero() {
        let d = array![[1.0, 0.2], [1.0, -0.4], [1.0, 0.9]];
        let y = [0.3, 1.2, -2.0];
        let s = weighted_least_squares(d.view(), &y, &[1.0, 2.0, 0.5], &y).unwrap();
        assert!(s.coefficients.iter().all(|c| c.abs() < 1e-14));
    }

    #[test]
    fn rank_deficient_design_returns_min_norm() {
        // Two identical columns: the minimum-norm solution splits evenly.
        let d = array![[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]];
        let s = weighted_least_squares(d.view(), &[2.0, 2.0, 2.0], &[1.0; 3], &[0.0; 3]).unwrap();
        assert!(s.rank_deficient);
        assert_eq!(s.rank, 1);
        assert!((s.coefficients[0] - 1.0).abs() < 1e-12);
        assert!((s.coefficients[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_model_interpolates_linear_truth() {
        let x = array![[1.0], [2.0], [3.0], [4.0], [5.0]];
        let y: Vec<f64> = x.column(0).iter().map(|v| 2.0 * v + 1.0).collect();
        let m = LinearModel::fit(x.view(), &y, None, 0.0).unwrap();
        for (p, t) in m.predict(x.view()).iter().zip(&y) {
            assert!((p - t).abs() <= 1e-10);
        }
    }

    #[test]
    fn constant_feature_does_not_abort() {
        let x = array![[1.0], [1.0], [1.0]];
        let m = LinearModel::fit(x.view(), &[1.0, 2.0, 3.0], None, 0.0).unwrap();
        let p = m.predict(x.view());
        assert!(p.iter().all(|v| (v - 2.0).abs() < 1e-10));
    }

    /// Brute-force normal-equation oracle: Gaussian elimination on
    /// `D' W D beta = D' W (y - offset)`.
    fn normal_equation_oracle(d: &Array2<f64>, y: &[f64], w: &[f64]) -> Vec<f64> {
        let q = d.ncols();
        let mut m = vec![vec![0.0; q + 1]; q];
        for i in 0..d.nrows() {
            for r in 0..q {
                for c in 0..q {
                    m[r][c] += w[i] * d[[i, r]] * d[[i, c]];
                }
                m[r][q] += w[i] * d[[i, r]] * y[i];
            }
        }
        for col in 0..q {
            let piv = (col..q).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).unwrap();
            m.swap(col, piv);
            for r in 0..q {
                if r != col {
                    let f = m[r][col] / m[col][col];
                    for c in col..=q {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
        (0..q).map(|r| m[r][q] / m[r][r]).collect()
    }

    proptest! {
        #[test]
        fn unit_weights_match_ordinary_least_squares(
            n in 4usize..=5,
            vals in proptest::collection::vec(-2.0f64..2.0, 15),
            ys in proptest::collection::vec(-3.0f64..3.0, 5),
        ) {
            let q = 3;
            let mut d = Array2::zeros((n, q));
            for i in 0..n {
                d[[i, 0]] = 1.0;
                d[[i, 1]] = vals[i];
                d[[i, 2]] = vals[5 + i] + 0.5 * vals[10 + i];
            }
            let y = &ys[..n];
            let w = vec![1.0; n];
            // Skip nearly singular draws where the oracle itself is unstable.
            let gram_det = {
                let o = normal_equation_oracle(&d, y, &w);
                o.iter().all(|v| v.is_finite() && v.abs() < 1e6)
            };
            prop_assume!(gram_det);
            let oracle = normal_equation_oracle(&d, y, &w);
            let s = weighted_least_squares(d.view(), y, &w, &vec![0.0; n]).unwrap();
            for (a, b) in s.coefficients.iter().zip(&oracle) {
                prop_assert!((a - b).abs() <= 1e-8 * (1.0 + b.abs()));
            }
        }
    }
}
