//! Panel data with monotone dropout over `L` post-baseline visits and the
//! missingness-aware DR-learner built on sequential nuisances.
//!
//! Visit `j` (for `j = 1..L`) first records whether the unit is still in the
//! study (`C_j`) and, if so, the visit covariates `Z_j`. The final visit
//! carries the outcome instead of covariates. Dropout is absorbing.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{assign_folds, Dataset, FoldAssignment};
use crate::error::{Error, Result};
use crate::learners::{LearnerSpec, Task};
use crate::meta::{stage_two, CateLearner, CateModel, MissingPolicy, PipelineConfig, Variant};
use crate::nuisance::{clip_observation, clip_propensity, fit_predict, MissingnessModel, NuisanceSpecs};
use crate::pseudo::{PseudoKind, PseudoOutcomes};
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct PanelDataset {
    baseline: Array2<f64>,
    /// Covariates of visits `1..L-1`; rows after dropout hold NaN.
    visits: Vec<Array2<f64>>,
    /// `observed[j - 1][i]` is `C_j` for row `i`.
    observed: Vec<Vec<bool>>,
    treatment: Vec<bool>,
    outcome: Vec<Option<f64>>,
    heterogeneity_index: Vec<usize>,
    baseline_names: Vec<String>,
    visit_names: Vec<Vec<String>>,
}

impl PanelDataset {
    /// Validates shapes and the presence rules: dropout is absorbing, visit
    /// covariates are present exactly while the unit is observed, and the
    /// outcome is present exactly when the last visit is observed.
    pub fn new(
        baseline: Array2<f64>,
        visits: Vec<Array2<f64>>,
        observed: Vec<Vec<bool>>,
        treatment: Vec<bool>,
        outcome: Vec<Option<f64>>,
        heterogeneity_index: Vec<usize>,
    ) -> Result<Self> {
        let (n, p) = baseline.dim();
        if n == 0 || p == 0 {
            return Err(Error::InvalidArgument("panel needs rows and baseline covariates".into()));
        }
        let l = observed.len();
        if l == 0 {
            return Err(Error::InvalidArgument("panel needs at least one visit".into()));
        }
        if visits.len() != l - 1 {
            return Err(Error::InvalidArgument(format!(
                "{l} visits need {} covariate blocks, got {}",
                l - 1,
                visits.len()
            )));
        }
        if treatment.len() != n || outcome.len() != n || observed.iter().any(|c| c.len() != n) {
            return Err(Error::InvalidArgument("panel column lengths differ".into()));
        }
        if let Some(v) = visits.iter().find(|v| v.nrows() != n || v.ncols() == 0) {
            return Err(Error::InvalidArgument(format!(
                "visit covariate block has shape {:?}, expected {n} rows",
                v.dim()
            )));
        }
        if heterogeneity_index.is_empty() || heterogeneity_index.iter().any(|&j| j >= p) {
            return Err(Error::InvalidArgument("heterogeneity index must name baseline columns".into()));
        }
        if baseline.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("baseline covariates must be finite".into()));
        }
        for i in 0..n {
            for j in 1..l {
                if observed[j][i] && !observed[j - 1][i] {
                    return Err(Error::InvalidArgument(format!(
                        "row {i}: intermittent missingness, visit {} observed after dropout",
                        j + 1
                    )));
                }
            }
            for (j, v) in visits.iter().enumerate() {
                let row = v.row(i);
                let ok = if observed[j][i] {
                    row.iter().all(|x| x.is_finite())
                } else {
                    row.iter().all(|x| x.is_nan())
                };
                if !ok {
                    return Err(Error::InvalidArgument(format!(
                        "row {i}: visit {} covariates must be present exactly when observed",
                        j + 1
                    )));
                }
            }
            match outcome[i] {
                Some(y) if !observed[l - 1][i] || !y.is_finite() => {
                    return Err(Error::InvalidArgument(format!(
                        "row {i}: outcome present for a dropout or not finite"
                    )))
                }
                None if observed[l - 1][i] => {
                    return Err(Error::InvalidArgument(format!("row {i}: observed outcome is missing")))
                }
                _ => {}
            }
        }
        let baseline_names = (1..=p).map(|j| format!("z0_{j}")).collect();
        let visit_names = visits
            .iter()
            .enumerate()
            .map(|(j, v)| (1..=v.ncols()).map(|k| format!("z{}_{k}", j + 1)).collect())
            .collect();
        Ok(Self {
            baseline,
            visits,
            observed,
            treatment,
            outcome,
            heterogeneity_index,
            baseline_names,
            visit_names,
        })
    }

    /// Single-visit panel equivalent to a cross-sectional dataset.
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        let mut panel = Self::new(
            data.covariates().to_owned(),
            Vec::new(),
            vec![data.observed().to_vec()],
            data.treatment().to_vec(),
            data.outcome().to_vec(),
            data.heterogeneity_index().to_vec(),
        )?;
        panel.baseline_names = data.covariate_names().to_vec();
        Ok(panel)
    }

    pub fn n(&self) -> usize {
        self.baseline.nrows()
    }

    /// Number of post-baseline visits `L`.
    pub fn n_visits(&self) -> usize {
        self.observed.len()
    }

    pub fn baseline(&self) -> ArrayView2<'_, f64> {
        self.baseline.view()
    }

    /// Covariates of visit `j` in `1..L`.
    pub fn visit(&self, j: usize) -> ArrayView2<'_, f64> {
        self.visits[j - 1].view()
    }

    pub fn treatment(&self) -> &[bool] {
        &self.treatment
    }

    pub fn outcome(&self) -> &[Option<f64>] {
        &self.outcome
    }

    pub fn heterogeneity_index(&self) -> &[usize] {
        &self.heterogeneity_index
    }

    pub fn baseline_names(&self) -> &[String] {
        &self.baseline_names
    }

    /// `C_j` for row `i`, `j` in `1..=L`.
    pub fn c(&self, j: usize, i: usize) -> bool {
        self.observed[j - 1][i]
    }

    /// Whether `C_1 = ... = C_t = 1`; always true for `t = 0`.
    pub fn observed_through(&self, i: usize, t: usize) -> bool {
        t == 0 || self.observed[t - 1][i]
    }

    pub fn x_matrix(&self) -> Array2<f64> {
        self.baseline.select(Axis(1), &self.heterogeneity_index)
    }

    /// `[A?, Z_0, Z_1, ..., Z_depth]` for the given rows, which must be
    /// observed through `depth`.
    pub fn history(&self, rows: &[usize], depth: usize, with_treatment: bool) -> Array2<f64> {
        let offset = usize::from(with_treatment);
        let width = offset + self.baseline.ncols() + self.visits[..depth].iter().map(|v| v.ncols()).sum::<usize>();
        let mut out = Array2::zeros((rows.len(), width));
        for (r, &i) in rows.iter().enumerate() {
            if with_treatment {
                out[[r, 0]] = f64::from(u8::from(self.treatment[i]));
            }
            let mut col = offset;
            for &v in self.baseline.row(i) {
                out[[r, col]] = v;
                col += 1;
            }
            for block in &self.visits[..depth] {
                for &v in block.row(i) {
                    out[[r, col]] = v;
                    col += 1;
                }
            }
        }
        out
    }
}

/// Options specific to panel estimation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelOptions {
    /// Augment each iterated-regression target with an inverse-hazard
    /// weighted residual from the step before.
    #[serde(default)]
    pub sequential_dr: bool,
    /// Fit one dropout model over all visits with the visit index as a
    /// feature instead of one model per visit.
    #[serde(default)]
    pub pooled_hazard: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelSpec {
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub options: PanelOptions,
}

/// Cross-fitted sequential nuisances.
#[derive(Clone, Debug)]
pub struct SequentialNuisances {
    pi: Vec<f64>,
    /// `n x (L + 1)`; column `t` is the cumulative observation probability
    /// through visit `t`, carried forward after dropout.
    g_cum: Array2<f64>,
    /// Per arm, `n x (L + 1)`; column 0 is the observed outcome and column
    /// `t` the step-`t` iterated regression. NaN where undefined.
    mu: [Array2<f64>; 2],
    folds: FoldAssignment,
    clip_floor: f64,
}

impl SequentialNuisances {
    pub fn n(&self) -> usize {
        self.pi.len()
    }
    pub fn n_visits(&self) -> usize {
        self.g_cum.ncols() - 1
    }
    pub fn pi(&self) -> &[f64] {
        &self.pi
    }
    pub fn g_cum(&self) -> ArrayView2<'_, f64> {
        self.g_cum.view()
    }
    pub fn mu(&self, arm: bool) -> ArrayView2<'_, f64> {
        self.mu[usize::from(arm)].view()
    }
    pub fn folds(&self) -> &FoldAssignment {
        &self.folds
    }
    pub fn clip_floor(&self) -> f64 {
        self.clip_floor
    }
}

struct FoldOutput {
    rows: Vec<usize>,
    pi: Vec<f64>,
    /// `hazard[s - 1][r]` for fold row `r`; one when not at risk.
    hazard: Vec<Vec<f64>>,
    /// `mu[arm][t - 1][r]`.
    mu: [Vec<Vec<f64>>; 2],
}

fn hazard_seed(seed: u64, step: usize, k: usize) -> u64 {
    if step == 1 {
        seed::derive(seed, &[seed::MISSINGNESS, k as u64])
    } else {
        seed::derive(seed, &[seed::HAZARD, step as u64, k as u64])
    }
}

fn outcome_seed(seed: u64, arm: bool, step: usize, k: usize) -> u64 {
    if step == 1 {
        let label = if arm { seed::OUTCOME1 } else { seed::OUTCOME0 };
        seed::derive(seed::derive(seed, &[label]), &[k as u64])
    } else {
        seed::derive(seed, &[seed::SEQUENTIAL, u64::from(arm), step as u64, k as u64])
    }
}

/// Per-visit hazards `P[C_s = 1 | A, history, still observed]` for `rows`,
/// each visit fit on the at-risk rows of `train`. Entries for rows not at
/// risk are one.
fn per_visit_hazards(
    panel: &PanelDataset,
    train: &[usize],
    rows: &[usize],
    spec: &LearnerSpec,
    seed: u64,
    k: usize,
) -> Result<Vec<Vec<f64>>> {
    let l = panel.n_visits();
    let mut out = Vec::with_capacity(l);
    for s in 1..=l {
        let at_risk: Vec<usize> = train.iter().copied().filter(|&i| panel.observed_through(i, s - 1)).collect();
        if at_risk.is_empty() {
            return Err(Error::EmptyRiskSet { step: s });
        }
        let targets: Vec<usize> = rows.iter().copied().filter(|&i| panel.observed_through(i, s - 1)).collect();
        let mut h = vec![1.0; rows.len()];
        if !at_risk.iter().all(|&i| panel.c(s, i)) && !targets.is_empty() {
            let c: Vec<f64> = at_risk.iter().map(|&i| f64::from(u8::from(panel.c(s, i)))).collect();
            let pred = fit_predict(
                spec,
                panel.history(&at_risk, s - 1, true).view(),
                &c,
                Task::Probability,
                hazard_seed(seed, s, k),
                panel.history(&targets, s - 1, true).view(),
            )?;
            let mut it = pred.into_iter();
            for (r, &i) in rows.iter().enumerate() {
                if panel.observed_through(i, s - 1) {
                    h[r] = it.next().expect("one prediction per target");
                }
            }
        }
        out.push(h);
    }
    Ok(out)
}

/// Features `[s, A, Z_0, Z_{s-1}]` for the pooled dropout model; the last
/// block is zero at the first visit.
fn pooled_features(panel: &PanelDataset, records: &[(usize, usize)]) -> Array2<f64> {
    let p = panel.baseline.ncols();
    let q = panel.visits.first().map_or(0, |v| v.ncols());
    let mut out = Array2::zeros((records.len(), 2 + p + q));
    for (r, &(i, s)) in records.iter().enumerate() {
        out[[r, 0]] = s as f64;
        out[[r, 1]] = f64::from(u8::from(panel.treatment[i]));
        for j in 0..p {
            out[[r, 2 + j]] = panel.baseline[[i, j]];
        }
        if s > 1 {
            for j in 0..q {
                out[[r, 2 + p + j]] = panel.visits[s - 2][[i, j]];
            }
        }
    }
    out
}

fn pooled_hazards(
    panel: &PanelDataset,
    train: &[usize],
    rows: &[usize],
    spec: &LearnerSpec,
    seed: u64,
    k: usize,
) -> Result<Vec<Vec<f64>>> {
    let l = panel.n_visits();
    if panel.visits.iter().any(|v| v.ncols() != panel.visits[0].ncols()) {
        return Err(Error::Config("pooled hazards need the same covariates at every visit".into()));
    }
    let records = |set: &[usize]| -> Vec<(usize, usize)> {
        (1..=l)
            .flat_map(|s| set.iter().filter(move |&&i| panel.observed_through(i, s - 1)).map(move |&i| (i, s)))
            .collect()
    };
    let train_rec = records(train);
    for s in 1..=l {
        if !train_rec.iter().any(|&(_, t)| t == s) {
            return Err(Error::EmptyRiskSet { step: s });
        }
    }
    let mut out = vec![vec![1.0; rows.len()]; l];
    if train_rec.iter().all(|&(i, s)| panel.c(s, i)) {
        return Ok(out);
    }
    let c: Vec<f64> = train_rec.iter().map(|&(i, s)| f64::from(u8::from(panel.c(s, i)))).collect();
    let pos: HashMap<usize, usize> = rows.iter().enumerate().map(|(r, &i)| (i, r)).collect();
    let test_rec = records(rows);
    let pred = fit_predict(
        spec,
        pooled_features(panel, &train_rec).view(),
        &c,
        Task::Probability,
        seed::derive(seed, &[seed::HAZARD, 0, k as u64]),
        pooled_features(panel, &test_rec).view(),
    )?;
    for (&(i, s), h) in test_rec.iter().zip(pred) {
        out[s - 1][pos[&i]] = h;
    }
    Ok(out)
}

fn fit_fold(
    panel: &PanelDataset,
    folds: &FoldAssignment,
    k: usize,
    specs: &NuisanceSpecs,
    options: &PanelOptions,
    clip_floor: f64,
    seed: u64,
) -> Result<FoldOutput> {
    let l = panel.n_visits();
    let inside = folds.rows_in(k);
    let outside = folds.rows_outside(k);
    let a_train: Vec<f64> = outside.iter().map(|&i| f64::from(u8::from(panel.treatment[i]))).collect();
    let z_in = panel.history(&inside, 0, false);
    let pi = fit_predict(
        &specs.propensity,
        panel.history(&outside, 0, false).view(),
        &a_train,
        Task::Probability,
        seed::derive(seed, &[seed::PROPENSITY, k as u64]),
        z_in.view(),
    )?;

    let hazards = |rows: &[usize]| {
        if options.pooled_hazard {
            pooled_hazards(panel, &outside, rows, &specs.missingness, seed, k)
        } else {
            per_visit_hazards(panel, &outside, rows, &specs.missingness, seed, k)
        }
    };
    let hazard = hazards(&inside)?;
    // In-sample hazards on the training rows feed the augmented targets.
    let train_hazard = if options.sequential_dr && l > 1 {
        Some(hazards(&outside)?)
    } else {
        None
    };
    let train_pos: HashMap<usize, usize> = outside.iter().enumerate().map(|(r, &i)| (i, r)).collect();

    let mut mu: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
    for arm in [false, true] {
        let mut target: HashMap<usize, f64> = HashMap::new();
        for t in 1..=l {
            let depth = l - t;
            let train: Vec<usize> = outside
                .iter()
                .copied()
                .filter(|&i| panel.treatment[i] == arm && panel.observed_through(i, depth + 1))
                .collect();
            if train.is_empty() {
                return Err(if l == 1 {
                    Error::EmptyArm {
                        fold: k,
                        arm: u8::from(arm),
                    }
                } else {
                    Error::EmptyRiskSet { step: t }
                });
            }
            let y: Vec<f64> = if t == 1 {
                train.iter().map(|&i| panel.outcome[i].expect("observed outcome")).collect()
            } else {
                train.iter().map(|&i| target[&i]).collect()
            };
            let model = crate::learners::fit(
                &specs.outcome,
                panel.history(&train, depth, false).view(),
                &y,
                None,
                Task::Regression,
                outcome_seed(seed, arm, t, k),
            )?;
            let avail: Vec<usize> = inside.iter().copied().filter(|&i| panel.observed_through(i, depth)).collect();
            let mut col = vec![f64::NAN; inside.len()];
            if !avail.is_empty() {
                let pred = model.predict(panel.history(&avail, depth, false).view())?;
                let mut it = pred.into_iter();
                for (r, &i) in inside.iter().enumerate() {
                    if panel.observed_through(i, depth) {
                        col[r] = it.next().expect("one prediction per row");
                    }
                }
            }
            mu[usize::from(arm)].push(col);
            if t < l {
                let next: Vec<usize> = outside
                    .iter()
                    .copied()
                    .filter(|&i| panel.treatment[i] == arm && panel.observed_through(i, depth))
                    .collect();
                let pred = model.predict(panel.history(&next, depth, false).view())?;
                let mut updated = HashMap::with_capacity(next.len());
                for (&i, m) in next.iter().zip(pred) {
                    let v = match &train_hazard {
                        Some(h) if panel.c(depth + 1, i) => {
                            let hz = clip_observation(h[depth][train_pos[&i]], clip_floor);
                            m + (target_or_outcome(panel, &target, t, i) - m) / hz
                        }
                        _ => m,
                    };
                    updated.insert(i, v);
                }
                target = updated;
            }
        }
    }
    Ok(FoldOutput {
        rows: inside,
        pi,
        hazard,
        mu,
    })
}

fn target_or_outcome(panel: &PanelDataset, target: &HashMap<usize, f64>, t: usize, i: usize) -> f64 {
    if t == 1 {
        panel.outcome[i].expect("observed outcome")
    } else {
        target[&i]
    }
}

/// Cross-fits the baseline propensity, per-visit dropout hazards and the
/// arm-specific iterated outcome regressions. With one visit every output
/// coincides with the cross-sectional nuisances under the same seed.
pub fn fit_sequential_nuisances(
    panel: &PanelDataset,
    folds: &FoldAssignment,
    specs: &NuisanceSpecs,
    clip_floor: f64,
    options: &PanelOptions,
    seed: u64,
) -> Result<SequentialNuisances> {
    specs.validate()?;
    if specs.missingness_model != MissingnessModel::Pooled {
        return Err(Error::Config("panel dropout models support only the pooled missingness model".into()));
    }
    if folds.n() != panel.n() {
        return Err(Error::InvalidArgument("fold map length differs from panel".into()));
    }
    if !(0.0..0.5).contains(&clip_floor) {
        return Err(Error::InvalidArgument(format!("clip_floor must be in [0, 0.5), got {clip_floor}")));
    }
    let parts: Vec<Result<FoldOutput>> = (0..folds.k())
        .into_par_iter()
        .map(|k| fit_fold(panel, folds, k, specs, options, clip_floor, seed))
        .collect();
    let (n, l) = (panel.n(), panel.n_visits());
    let mut pi = vec![0.0; n];
    let mut g_cum = Array2::ones((n, l + 1));
    let mut mu = [Array2::from_elem((n, l + 1), f64::NAN), Array2::from_elem((n, l + 1), f64::NAN)];
    for part in parts {
        let part = part?;
        for (r, &i) in part.rows.iter().enumerate() {
            pi[i] = clip_propensity(part.pi[r], clip_floor);
            for s in 1..=l {
                g_cum[[i, s]] = if panel.observed_through(i, s - 1) {
                    g_cum[[i, s - 1]] * clip_observation(part.hazard[s - 1][r], clip_floor)
                } else {
                    g_cum[[i, s - 1]]
                };
            }
            for arm in 0..2 {
                if let Some(y) = panel.outcome[i] {
                    mu[arm][[i, 0]] = y;
                }
                for t in 1..=l {
                    mu[arm][[i, t]] = part.mu[arm][t - 1][r];
                }
            }
        }
    }
    if mu.iter().any(|m| m.column(l).iter().any(|v| !v.is_finite())) {
        return Err(Error::Numerical("non-finite outcome regression".into()));
    }
    Ok(SequentialNuisances {
        pi,
        g_cum,
        mu,
        folds: folds.clone(),
        clip_floor,
    })
}

/// Panel pseudo-outcome: a telescoping sum of inverse-probability weighted
/// increments of the iterated regressions, plus the plug-in contrast. Each
/// term is present only while the unit is still observed.
pub fn mdr_longitudinal_pseudo(panel: &PanelDataset, nuis: &SequentialNuisances) -> Result<PseudoOutcomes> {
    let (n, l) = (panel.n(), panel.n_visits());
    if nuis.n() != n || nuis.n_visits() != l {
        return Err(Error::InvalidArgument("sequential nuisances do not match the panel".into()));
    }
    let values = (0..n)
        .map(|i| {
            let a = f64::from(u8::from(panel.treatment[i]));
            let pi = nuis.pi[i];
            let own = &nuis.mu[usize::from(panel.treatment[i])];
            let mut acc: Option<f64> = None;
            for t in 1..=l {
                if !panel.observed_through(i, t) {
                    break;
                }
                let cbar = 1.0;
                let term = (a - pi) * cbar / (pi * (1.0 - pi) * nuis.g_cum[[i, t]]) * (own[[i, l - t]] - own[[i, l + 1 - t]]);
                acc = Some(acc.map_or(term, |s| s + term));
            }
            let (mu1, mu0) = (nuis.mu[1][[i, l]], nuis.mu[0][[i, l]]);
            match acc {
                None => mu1 - mu0,
                Some(s) => s + mu1 - mu0,
            }
        })
        .collect();
    Ok(PseudoOutcomes::all(PseudoKind::Mdr, values))
}

/// Fits the panel CATE model `theta(X)` on baseline heterogeneity
/// covariates.
pub fn estimate_cate_longitudinal(panel: &PanelDataset, spec: &PanelSpec, seed: u64) -> Result<CateModel> {
    spec.pipeline.validate()?;
    let config = &spec.pipeline;
    let folds = assign_folds(panel.n(), config.folds, seed::derive(seed, &[seed::FOLDS]))?;
    let nuis = fit_sequential_nuisances(panel, &folds, &config.nuisances, config.clip_floor, &spec.options, seed)?;
    let pseudo = mdr_longitudinal_pseudo(panel, &nuis)?;
    let x = panel.x_matrix();
    let model = stage_two(&config.stage2, x.view(), &pseudo, seed)?;
    let variant = Variant::new(CateLearner::Mdr, MissingPolicy::Native)?;
    Ok(CateModel::from_stage2(variant, seed, x.ncols(), Some(folds), model))
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<Option<f64>> {
    if raw.is_empty() || raw.eq_ignore_ascii_case("nan") || raw.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    raw.parse::<f64>().map(Some).map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("expected a number or empty cell, found `{raw}`"),
    })
}

fn parse_flag(raw: &str, row: usize, column: &str) -> Result<bool> {
    match parse_cell(raw, row, column)? {
        Some(v) if v == 0.0 => Ok(false),
        Some(v) if v == 1.0 => Ok(true),
        _ => Err(Error::Parse {
            row,
            column: column.to_string(),
            message: format!("expected 0 or 1, found `{raw}`"),
        }),
    }
}

pub fn load_panel_csv(path: impl AsRef<Path>, x_cols: Option<&[String]>) -> Result<PanelDataset> {
    read_panel_csv(File::open(path)?, x_cols)
}

/// Reads the wide format `z0_*, a, c1, z1_*, ..., cL, y`. Visit blocks are
/// recognised by their `z<j>_` prefix; empty cells mark unobserved values.
pub fn read_panel_csv<R: Read>(reader: R, x_cols: Option<&[String]>) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("column `{name}` not found in panel header")))
    };
    let a_col = find("a")?;
    let y_col = find("y")?;
    let mut l = 0;
    while headers.iter().any(|h| *h == format!("c{}", l + 1)) {
        l += 1;
    }
    if l == 0 {
        return Err(Error::Config("panel header has no `c1` column".into()));
    }
    let c_cols: Vec<usize> = (1..=l).map(|j| find(&format!("c{j}"))).collect::<Result<_>>()?;
    let block = |j: usize| -> Vec<usize> {
        let prefix = format!("z{j}_");
        (0..headers.len()).filter(|&c| headers[c].starts_with(&prefix)).collect()
    };
    let z_cols: Vec<Vec<usize>> = (0..l).map(block).collect();
    if z_cols[0].is_empty() {
        return Err(Error::Config("panel header has no baseline `z0_` columns".into()));
    }
    if let Some(j) = (1..l).find(|&j| z_cols[j].is_empty()) {
        return Err(Error::Config(format!("panel header has no `z{j}_` columns")));
    }
    let x_index = match x_cols {
        Some(cols) => cols
            .iter()
            .map(|name| {
                z_cols[0]
                    .iter()
                    .position(|&c| headers[c] == *name)
                    .ok_or_else(|| Error::Config(format!("x column `{name}` is not a baseline column")))
            })
            .collect::<Result<Vec<_>>>()?,
        None => (0..z_cols[0].len()).collect(),
    };

    let mut values: Vec<Vec<f64>> = vec![Vec::new(); l];
    let mut observed = vec![Vec::new(); l];
    let (mut a, mut y) = (Vec::new(), Vec::new());
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let field = |c: usize| record.get(c).unwrap_or("");
        for (j, cols) in z_cols.iter().enumerate() {
            for &c in cols {
                let v = parse_cell(field(c), row, &headers[c])?;
                if j == 0 && v.is_none() {
                    return Err(Error::Parse {
                        row,
                        column: headers[c].clone(),
                        message: "baseline covariates cannot be missing".into(),
                    });
                }
                values[j].push(v.unwrap_or(f64::NAN));
            }
        }
        for (j, &c) in c_cols.iter().enumerate() {
            observed[j].push(parse_flag(field(c), row, &headers[c])?);
        }
        a.push(parse_flag(field(a_col), row, "a")?);
        y.push(parse_cell(field(y_col), row, "y")?);
    }
    let n = a.len();
    if n == 0 {
        return Err(Error::Config("panel CSV contains no data rows".into()));
    }
    let mut blocks = values
        .into_iter()
        .zip(&z_cols)
        .map(|(v, cols)| Array2::from_shape_vec((n, cols.len()), v).map_err(|e| Error::InvalidArgument(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let baseline = blocks.remove(0);
    let mut panel = PanelDataset::new(baseline, blocks, observed, a, y, x_index)?;
    panel.baseline_names = z_cols[0].iter().map(|&c| headers[c].clone()).collect();
    panel.visit_names = z_cols[1..]
        .iter()
        .map(|cols| cols.iter().map(|&c| headers[c].clone()).collect())
        .collect();
    Ok(panel)
}

pub fn write_panel_csv<W: Write>(panel: &PanelDataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let l = panel.n_visits();
    let mut header = panel.baseline_names.clone();
    header.push("a".into());
    for j in 1..=l {
        header.push(format!("c{j}"));
        if j < l {
            header.extend(panel.visit_names[j - 1].iter().cloned());
        }
    }
    header.push("y".into());
    wtr.write_record(&header)?;
    let num = |v: f64| if v.is_nan() { String::new() } else { v.to_string() };
    for i in 0..panel.n() {
        let mut rec: Vec<String> = panel.baseline.row(i).iter().map(|&v| num(v)).collect();
        rec.push(u8::from(panel.treatment[i]).to_string());
        for j in 1..=l {
            rec.push(u8::from(panel.c(j, i)).to_string());
            if j < l {
                rec.extend(panel.visits[j - 1].row(i).iter().map(|&v| num(v)));
            }
        }
        rec.push(panel.outcome[i].map(|v| v.to_string()).unwrap_or_default());
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::LearnerSpec;
    use crate::meta::{estimate_cate, predict_cate, MetaLearnerSpec};
    use crate::nuisance::crossfit_nuisances;
    use crate::pseudo::mdr_pseudo;
    use crate::sim::{generate_dgp, DgpId};

    fn fast_specs() -> NuisanceSpecs {
        NuisanceSpecs {
            propensity: LearnerSpec::ridge_logistic(),
            missingness: LearnerSpec::forest(20, 10),
            outcome: LearnerSpec::linear(),
            imputation: LearnerSpec::linear(),
            missingness_model: MissingnessModel::Pooled,
        }
    }

    fn toy_panel() -> PanelDataset {
        let base = Array2::from_shape_vec((3, 1), vec![0.1, 0.2, 0.3]).unwrap();
        let visit = Array2::from_shape_vec((3, 1), vec![1.0, f64::NAN, 2.0]).unwrap();
        PanelDataset::new(
            base,
            vec![visit],
            vec![vec![true, false, true], vec![true, false, false]],
            vec![true, false, true],
            vec![Some(1.0), None, None],
            vec![0],
        )
        .unwrap()
    }

    #[test]
    fn validation_rejects_intermittent_missingness() {
        let base = Array2::zeros((1, 1));
        let visit = Array2::from_elem((1, 1), f64::NAN);
        let err = PanelDataset::new(base, vec![visit], vec![vec![false], vec![true]], vec![true], vec![Some(1.0)], vec![0]);
        assert!(err.is_err());
    }

    #[test]
    fn validation_rejects_presence_mismatch() {
        let base = Array2::zeros((1, 1));
        let visit = Array2::from_elem((1, 1), 2.0);
        assert!(PanelDataset::new(base.clone(), vec![visit], vec![vec![false], vec![false]], vec![true], vec![None], vec![0]).is_err());
        let visit = Array2::from_elem((1, 1), 2.0);
        assert!(PanelDataset::new(base, vec![visit], vec![vec![true], vec![true]], vec![true], vec![None], vec![0]).is_err());
    }

    #[test]
    fn history_concatenates_blocks() {
        let p = toy_panel();
        let h = p.history(&[0, 2], 1, true);
        assert_eq!(h.row(0).to_vec(), vec![1.0, 0.1, 1.0]);
        assert_eq!(h.row(1).to_vec(), vec![1.0, 0.3, 2.0]);
        assert!(p.observed_through(1, 0) && !p.observed_through(1, 1));
    }

    #[test]
    fn csv_round_trip() {
        let p = toy_panel();
        let mut buf = Vec::new();
        write_panel_csv(&p, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("z0_1,a,c1,z1_1,c2,y"));
        let back = read_panel_csv(buf.as_slice(), None).unwrap();
        assert_eq!(back.n_visits(), 2);
        assert_eq!(back.outcome(), p.outcome());
        assert!(back.visit(1)[[1, 0]].is_nan());
        assert_eq!(back.visit(1)[[2, 0]], 2.0);
    }

    fn hand_nuisances(panel: &PanelDataset, g: Vec<[f64; 3]>, mu1: Vec<[f64; 3]>, mu0: Vec<[f64; 3]>) -> SequentialNuisances {
        let n = panel.n();
        let to = |v: Vec<[f64; 3]>| Array2::from_shape_vec((n, 3), v.into_iter().flatten().collect()).unwrap();
        SequentialNuisances {
            pi: vec![0.5; n],
            g_cum: to(g),
            mu: [to(mu0), to(mu1)],
            folds: assign_folds(n, 2, 1).unwrap(),
            clip_floor: 0.0,
        }
    }

    #[test]
    fn two_visit_hand_value() {
        let base = Array2::zeros((2, 1));
        let visit = Array2::zeros((2, 1));
        let panel = PanelDataset::new(
            base,
            vec![visit],
            vec![vec![true; 2], vec![true; 2]],
            vec![true; 2],
            vec![Some(1.0); 2],
            vec![0],
        )
        .unwrap();
        // mu1(1) = 0.7, mu1(2) = 0.5: increments 0.2 and 0.3.
        let nuis = hand_nuisances(&panel, vec![[1.0; 3]; 2], vec![[1.0, 0.7, 0.5]; 2], vec![[f64::NAN, 0.1, 0.1]; 2]);
        let v = mdr_longitudinal_pseudo(&panel, &nuis).unwrap().dense();
        assert!((v[0] - (1.0 + 0.5 - 0.1)).abs() < 1e-12);
    }

    #[test]
    fn dropout_at_first_visit_gives_contrast() {
        let p = toy_panel();
        let nuis = hand_nuisances(
            &p,
            vec![[1.0, 0.8, 0.6], [1.0, 0.8, 0.8], [1.0, 0.8, 0.5]],
            vec![[1.0, 0.7, 0.5], [f64::NAN, f64::NAN, 0.9], [f64::NAN, 0.2, 0.4]],
            vec![[f64::NAN, 0.0, 0.0], [f64::NAN, f64::NAN, 0.3], [f64::NAN, 0.1, 0.1]],
        );
        let v = mdr_longitudinal_pseudo(&p, &nuis).unwrap().dense();
        assert!(v.iter().all(|x| x.is_finite()));
        assert_eq!(v[1], 0.9 - 0.3);
        // Row 2 left before the outcome: only the first increment counts.
        let expected = 0.5 / 0.25 / 0.8 * (0.2 - 0.4) + 0.4 - 0.1;
        assert!((v[2] - expected).abs() < 1e-12);
    }

    #[test]
    fn single_visit_reduces_to_cross_sectional_exactly() {
        let (train, _) = generate_dgp(DgpId::Dgp1, 300, 10, 5).unwrap();
        let data = train.data;
        let panel = PanelDataset::from_dataset(&data).unwrap();
        let folds = assign_folds(data.n(), 5, 9).unwrap();
        let specs = fast_specs();
        let seq = fit_sequential_nuisances(&panel, &folds, &specs, 0.01, &PanelOptions::default(), 17).unwrap();
        let cross = crossfit_nuisances(&data, &folds, &specs, 0.01, 17).unwrap();
        assert_eq!(seq.pi(), cross.pi());
        assert_eq!(seq.g_cum().column(1).to_vec(), cross.g());
        assert_eq!(seq.mu(true).column(1).to_vec(), cross.mu1());
        assert_eq!(seq.mu(false).column(1).to_vec(), cross.mu0());
        let a = mdr_longitudinal_pseudo(&panel, &seq).unwrap().dense();
        let b = mdr_pseudo(&data, &cross).unwrap().dense();
        assert_eq!(a, b);
    }

    #[test]
    fn single_visit_cate_matches_mdr() {
        let (train, test) = generate_dgp(DgpId::Dgp1, 300, 20, 6).unwrap();
        let mut pipeline = PipelineConfig {
            nuisances: fast_specs(),
            stage2: LearnerSpec::forest(30, 10),
            folds: 3,
            ..PipelineConfig::default()
        };
        pipeline.clip_floor = 0.02;
        let spec = MetaLearnerSpec::new(CateLearner::Mdr, MissingPolicy::Native).with_pipeline(pipeline.clone());
        let x = test.data.x_matrix();
        let direct = predict_cate(&estimate_cate(&spec, &train.data, 4).unwrap(), x.view()).unwrap();
        let panel = PanelDataset::from_dataset(&train.data).unwrap();
        let pspec = PanelSpec {
            pipeline,
            options: PanelOptions::default(),
        };
        let via_panel = predict_cate(&estimate_cate_longitudinal(&panel, &pspec, 4).unwrap(), x.view()).unwrap();
        assert_eq!(direct, via_panel);
    }

    #[test]
    fn no_dropout_gives_unit_g() {
        let (train, _) = generate_dgp(DgpId::Dgp1, 200, 10, 2).unwrap();
        let all: Vec<Option<f64>> = (0..200).map(|i| Some(i as f64 / 200.0)).collect();
        let data = Dataset::new(train.data.covariates().to_owned(), train.data.treatment().to_vec(), vec![true; 200], all, vec![0]).unwrap();
        let panel = PanelDataset::from_dataset(&data).unwrap();
        let folds = assign_folds(200, 4, 3).unwrap();
        let seq = fit_sequential_nuisances(&panel, &folds, &fast_specs(), 0.01, &PanelOptions::default(), 1).unwrap();
        assert!(seq.g_cum().iter().all(|&g| g == 1.0));
    }
}
