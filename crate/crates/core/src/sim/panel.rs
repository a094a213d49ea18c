//! Two-visit panel simulation with history-dependent dropout.
//!
//! Baseline covariates, treatment and the first-visit dropout follow DGP 1.
//! An interim covariate block `Z_1 = 0.6 (Z0_3, Z0_4) + 0.4 U` is recorded at
//! visit one, and the second-visit hazard depends on it through
//! `expit(2.5 - 2 A 1{|Z1_1| > 0.5})`. The outcome is
//! `mu0(Z0) + A theta(Z0) + 0.5 Z1_1 + N(0, 1)`, so the CATE given baseline
//! covariates equals DGP 1's.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::longitudinal::PanelDataset;
use crate::seed;
use crate::stats::expit;

use super::dgp::DgpId;

const INTERIM_DIM: usize = 2;

#[derive(Clone, Debug)]
pub struct PanelDraw {
    pub panel: PanelDataset,
    /// `theta(Z0)` per row.
    pub theta: Vec<f64>,
}

/// Second-visit retention probability given treatment and the interim block.
pub fn second_visit_hazard(a: bool, z1: &[f64]) -> f64 {
    let flag = if a && z1[0].abs() > 0.5 { 1.0 } else { 0.0 };
    expit(2.5 - 2.0 * flag)
}

/// Draws `n` rows; with `censor = false` nobody drops out.
pub fn draw_panel(n: usize, seed: u64, censor: bool) -> Result<PanelDraw> {
    let id = DgpId::Dgp1;
    let p = id.n_covariates();
    let mut rng = seed::rng(seed);
    let mut z0 = Array2::zeros((n, p));
    let mut z1 = Array2::from_elem((n, INTERIM_DIM), f64::NAN);
    let (mut c1, mut c2) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut a, mut y, mut theta) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let mut row = vec![0.0; p];
    let mut interim = [0.0; INTERIM_DIM];
    for i in 0..n {
        for (j, v) in row.iter_mut().enumerate() {
            *v = rng.random_range(-1.0..1.0);
            z0[[i, j]] = *v;
        }
        let ai = rng.random_bool(id.propensity(&row));
        let stay1 = rng.random_bool(id.observation(ai, &row)) || !censor;
        for (j, v) in interim.iter_mut().enumerate() {
            *v = 0.6 * row[2 + j] + 0.4 * rng.random_range(-1.0..1.0);
        }
        let stay2 = stay1 && (rng.random_bool(second_visit_hazard(ai, &interim)) || !censor);
        let eps: f64 = rng.sample(StandardNormal);
        let th = id.theta(&row);
        let yi = id.mu0(&row) + if ai { th } else { 0.0 } + 0.5 * interim[0] + eps;
        if stay1 {
            for (j, &v) in interim.iter().enumerate() {
                z1[[i, j]] = v;
            }
        }
        a.push(ai);
        c1.push(stay1);
        c2.push(stay2);
        y.push(stay2.then_some(yi));
        theta.push(th);
    }
    let panel = PanelDataset::new(z0, vec![z1], vec![c1, c2], a, y, (0..p).collect())?;
    Ok(PanelDraw { panel, theta })
}
