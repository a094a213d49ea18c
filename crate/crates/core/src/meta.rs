//! End-to-end CATE meta-learners: nuisance cross-fitting, stage-one
//! pseudo-outcomes or targeting, and the stage-two regression on `X`.

use std::fmt;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{assign_folds, Dataset, FoldAssignment};
use crate::error::{Error, Result};
use crate::learners::{self, FittedModel, ForestParams, LearnerSpec, Task};
use crate::nuisance::{
    crossfit_nuisances, fit_imputation_model, imputed_nuisances, NuisanceEstimates, NuisanceSpecs,
    DEFAULT_CLIP_FLOOR,
};
use crate::pseudo::{dr_pseudo, iptw_ipcw_pseudo, mdr_pseudo, PseudoKind, PseudoOutcomes};
use crate::seed;
use crate::stats::median;
use crate::targeting::{build_sieve, ep_pseudo, ep_weights, itmle_update, SieveBasis, SieveConfig, TargetedOutcomes};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CateLearner {
    T,
    Dr,
    Ep,
    Mdr,
    Mep,
    IptwIpcw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissingPolicy {
    /// Outcome regressions and pseudo-outcomes on complete cases.
    Ac,
    /// Censored outcomes replaced by an imputation model's predictions.
    Imputed,
    /// Missingness handled inside the estimator.
    Native,
}

impl CateLearner {
    pub fn as_str(self) -> &'static str {
        match self {
            CateLearner::T => "t",
            CateLearner::Dr => "dr",
            CateLearner::Ep => "ep",
            CateLearner::Mdr => "mdr",
            CateLearner::Mep => "mep",
            CateLearner::IptwIpcw => "iptw-ipcw",
        }
    }
}

impl MissingPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            MissingPolicy::Ac => "ac",
            MissingPolicy::Imputed => "imputed",
            MissingPolicy::Native => "native",
        }
    }
}

/// Learner kind with its missing-data policy, written `kind-policy`, e.g.
/// `mdr-native` or `dr-ac`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Variant {
    pub learner: CateLearner,
    pub policy: MissingPolicy,
}

impl Variant {
    pub fn new(learner: CateLearner, policy: MissingPolicy) -> Result<Self> {
        use CateLearner::*;
        use MissingPolicy::*;
        let ok = match learner {
            T | Dr | Ep => policy != Native,
            Mdr | Mep | IptwIpcw => policy == Native,
        };
        if !ok {
            return Err(Error::Config(format!(
                "learner `{}` cannot be combined with missing policy `{}`",
                learner.as_str(),
                policy.as_str()
            )));
        }
        Ok(Self { learner, policy })
    }

    /// The six comparators of the simulation study plus the two
    /// missingness-aware learners.
    pub fn all() -> Vec<Variant> {
        use CateLearner::*;
        use MissingPolicy::*;
        [
            (Mdr, Native),
            (Mep, Native),
            (IptwIpcw, Native),
            (Dr, Ac),
            (Dr, Imputed),
            (Ep, Ac),
            (Ep, Imputed),
            (T, Ac),
            (T, Imputed),
        ]
        .into_iter()
        .map(|(l, p)| Variant { learner: l, policy: p })
        .collect()
    }

    pub fn needs_imputation(self) -> bool {
        self.policy == MissingPolicy::Imputed
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.learner.as_str(), self.policy.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (l, p) = s
            .rsplit_once('-')
            .ok_or_else(|| Error::Config(format!("learner variant `{s}` must look like `mdr-native`")))?;
        let learner: CateLearner = serde_json::from_value(serde_json::Value::String(l.into()))
            .map_err(|_| Error::Config(format!("unknown learner kind `{l}` in `{s}`")))?;
        let policy: MissingPolicy = serde_json::from_value(serde_json::Value::String(p.into()))
            .map_err(|_| Error::Config(format!("unknown missing policy `{p}` in `{s}`")))?;
        Variant::new(learner, policy)
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn default_stage2() -> LearnerSpec {
    LearnerSpec::RandomForest(ForestParams {
        trees: 500,
        min_node_size: 20,
        ..ForestParams::default()
    })
}

/// Shared estimation settings: everything except the learner variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub nuisances: NuisanceSpecs,
    #[serde(default = "default_stage2")]
    pub stage2: LearnerSpec,
    #[serde(default = "PipelineConfig::default_folds")]
    pub folds: usize,
    #[serde(default = "PipelineConfig::default_clip_floor")]
    pub clip_floor: f64,
    #[serde(default)]
    pub sieve: SieveConfig,
}

impl PipelineConfig {
    fn default_folds() -> usize {
        10
    }
    fn default_clip_floor() -> f64 {
        DEFAULT_CLIP_FLOOR
    }

    pub fn validate(&self) -> Result<()> {
        self.nuisances.validate()?;
        self.stage2.validate()?;
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if !(0.0..0.5).contains(&self.clip_floor) {
            return Err(Error::Config(format!(
                "clip_floor must be in [0, 0.5), got {}",
                self.clip_floor
            )));
        }
        if self.sieve.degree == Some(0) || !(1..=2).contains(&self.sieve.interaction_order) {
            return Err(Error::Config("sieve degree must be >= 1 and interaction_order 1 or 2".into()));
        }
        Ok(())
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            nuisances: NuisanceSpecs::default(),
            stage2: default_stage2(),
            folds: Self::default_folds(),
            clip_floor: Self::default_clip_floor(),
            sieve: SieveConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaLearnerSpec {
    pub learner: CateLearner,
    pub missing_policy: MissingPolicy,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    /// Cross-fitting seeds for median aggregation; the run seed alone when
    /// empty.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

impl MetaLearnerSpec {
    pub fn new(learner: CateLearner, missing_policy: MissingPolicy) -> Self {
        Self {
            learner,
            missing_policy,
            pipeline: PipelineConfig::default(),
            seeds: Vec::new(),
        }
    }

    pub fn with_pipeline(mut self, pipeline: PipelineConfig) -> Self {
        self.pipeline = pipeline;
        self
    }

    pub fn variant(&self) -> Result<Variant> {
        Variant::new(self.learner, self.missing_policy)
    }

    pub fn validate(&self) -> Result<()> {
        self.variant()?;
        self.pipeline.validate()
    }
}

/// Cross-fitted nuisances for one seed, shareable across learner variants.
#[derive(Clone, Debug)]
pub struct NuisanceBundle {
    pub folds: FoldAssignment,
    pub base: NuisanceEstimates,
    pub imputed: Option<ImputedBundle>,
}

#[derive(Clone, Debug)]
pub struct ImputedBundle {
    pub completed: Vec<f64>,
    pub nuisances: NuisanceEstimates,
}

pub fn fit_nuisance_bundle(
    data: &Dataset,
    config: &PipelineConfig,
    with_imputation: bool,
    seed: u64,
) -> Result<NuisanceBundle> {
    config.validate()?;
    let folds = assign_folds(data.n(), config.folds, seed::derive(seed, &[seed::FOLDS]))?;
    let base = crossfit_nuisances(data, &folds, &config.nuisances, config.clip_floor, seed)?;
    let imputed = if with_imputation {
        let completed = fit_imputation_model(data, &folds, &config.nuisances.imputation, seed)?;
        let filled = data.with_completed_outcomes(&completed)?;
        let nuisances = imputed_nuisances(&filled, &folds, &config.nuisances, &base, seed)?;
        Some(ImputedBundle { completed, nuisances })
    } else {
        None
    };
    Ok(NuisanceBundle { folds, base, imputed })
}

/// Stage-one result: the pseudo-outcome to regress on `X`, plus the
/// targeting details for the EP family.
#[derive(Clone, Debug)]
pub struct StageOne {
    pub pseudo: PseudoOutcomes,
    pub targeting: Option<(SieveBasis, TargetedOutcomes)>,
}

fn imputed_part(bundle: &NuisanceBundle) -> Result<&ImputedBundle> {
    bundle
        .imputed
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("imputed policy requires an imputation bundle".into()))
}

/// Builds the sieve on the training `X` with the configured degree.
pub fn sieve_for(data: &Dataset, config: &SieveConfig) -> Result<SieveBasis> {
    build_sieve(data.x_matrix().view(), config.degree_for(data.n()), config.interaction_order)
}

/// Stage one for `variant` on the rows `rows` of `data` (all rows when
/// `None`). EP-family targeting uses `basis` when given, which lets callers
/// freeze the rescaling bounds of the full training sample.
pub fn stage_one(
    variant: Variant,
    data: &Dataset,
    bundle: &NuisanceBundle,
    sieve: &SieveConfig,
    basis: Option<&SieveBasis>,
    rows: Option<&[usize]>,
) -> Result<StageOne> {
    use CateLearner::*;
    let take_data = |d: &Dataset| rows.map_or_else(|| d.clone(), |r| d.subset(r));
    let take_nuis = |n: &NuisanceEstimates| rows.map_or_else(|| n.clone(), |r| n.subset(r));
    let take_vec = |v: &[f64]| rows.map_or_else(|| v.to_vec(), |r| r.iter().map(|&i| v[i]).collect());
    let d = take_data(data);
    let imputed = variant.needs_imputation();
    let (nuis, completed) = if imputed {
        let ib = imputed_part(bundle)?;
        (take_nuis(&ib.nuisances), Some(take_vec(&ib.completed)))
    } else {
        (take_nuis(&bundle.base), None)
    };
    let pseudo = match variant.learner {
        T => {
            return Err(Error::InvalidArgument(
                "the T-learner has no pseudo-outcome".into(),
            ))
        }
        Dr => dr_pseudo(&d, &nuis, completed.as_deref())?,
        Mdr => mdr_pseudo(&d, &nuis)?,
        IptwIpcw => iptw_ipcw_pseudo(&d, &nuis)?,
        Ep | Mep => {
            let owned;
            let basis = match basis {
                Some(b) => b,
                None => {
                    owned = sieve_for(&d, sieve)?;
                    &owned
                }
            };
            let phi = basis.evaluate(d.x_matrix().view())?;
            let outcomes: Vec<Option<f64>> = match &completed {
                Some(c) => c.iter().map(|&y| Some(y)).collect(),
                None => d.outcome().to_vec(),
            };
            // With completed outcomes every row is treated as observed.
            let weights = if variant.learner == Mep {
                ep_weights(&d, &nuis, true)
            } else {
                ep_weights(&d, &nuis, false)
            };
            let targeted = itmle_update(d.treatment(), &outcomes, &nuis, phi.view(), &weights)?;
            let kind = if variant.learner == Mep {
                PseudoKind::Mep
            } else {
                PseudoKind::Ep
            };
            let pseudo = ep_pseudo(&targeted, kind);
            return Ok(StageOne {
                pseudo,
                targeting: Some((basis.clone(), targeted)),
            });
        }
    };
    Ok(StageOne {
        pseudo,
        targeting: None,
    })
}

/// Regresses the present pseudo-outcomes on `X`.
pub fn stage_two(
    spec: &LearnerSpec,
    x: ArrayView2<'_, f64>,
    pseudo: &PseudoOutcomes,
    seed: u64,
) -> Result<FittedModel> {
    let (rows, y) = pseudo.present();
    if rows.is_empty() {
        return Err(Error::NoEffectiveObservations);
    }
    let xs = x.select(Axis(0), &rows);
    learners::fit(spec, xs.view(), &y, None, Task::Regression, seed::derive(seed, &[seed::STAGE2]))
}

#[derive(Clone, Debug)]
enum Fit {
    Stage2(FittedModel),
    Plugin { mu0: FittedModel, mu1: FittedModel },
}

/// A fitted CATE model `theta(X)`.
#[derive(Clone, Debug)]
pub struct CateModel {
    variant: Variant,
    seed: u64,
    x_dim: usize,
    folds: Option<FoldAssignment>,
    fit: Fit,
}

impl CateModel {
    pub(crate) fn from_stage2(
        variant: Variant,
        seed: u64,
        x_dim: usize,
        folds: Option<FoldAssignment>,
        model: FittedModel,
    ) -> Self {
        Self {
            variant,
            seed,
            x_dim,
            folds,
            fit: Fit::Stage2(model),
        }
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn folds(&self) -> Option<&FoldAssignment> {
        self.folds.as_ref()
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    /// Stage-two regressor (absent for the T-learner).
    pub fn stage2_model(&self) -> Option<&FittedModel> {
        match &self.fit {
            Fit::Stage2(m) => Some(m),
            Fit::Plugin { .. } => None,
        }
    }
}

pub fn predict_cate(model: &CateModel, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    if x.ncols() != model.x_dim {
        return Err(Error::DimensionMismatch {
            expected: model.x_dim,
            got: x.ncols(),
        });
    }
    match &model.fit {
        Fit::Stage2(m) => m.predict(x),
        Fit::Plugin { mu0, mu1 } => {
            let p1 = mu1.predict(x)?;
            let p0 = mu0.predict(x)?;
            Ok(p1.iter().zip(&p0).map(|(a, b)| a - b).collect())
        }
    }
}

fn require_x_equals_z(data: &Dataset) -> Result<()> {
    if data.x_covers_z() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(
            "the T-learner requires X = Z: the heterogeneity covariates must include every covariate"
                .into(),
        ))
    }
}

fn fit_t_learner(
    variant: Variant,
    data: &Dataset,
    config: &PipelineConfig,
    bundle: Option<&NuisanceBundle>,
    seed: u64,
) -> Result<Fit> {
    require_x_equals_z(data)?;
    let z = data.x_matrix();
    let completed = match variant.policy {
        MissingPolicy::Imputed => {
            let bundle = bundle.ok_or_else(|| {
                Error::InvalidArgument("imputed policy requires an imputation bundle".into())
            })?;
            Some(imputed_part(bundle)?.completed.clone())
        }
        _ => None,
    };
    let mut models = Vec::with_capacity(2);
    for arm in [false, true] {
        let (rows, y): (Vec<usize>, Vec<f64>) = (0..data.n())
            .filter(|&i| data.treatment()[i] == arm)
            .filter_map(|i| match &completed {
                Some(c) => Some((i, c[i])),
                None => data.outcome()[i].map(|y| (i, y)),
            })
            .unzip();
        if rows.is_empty() {
            return Err(Error::EmptyArm {
                fold: 0,
                arm: u8::from(arm),
            });
        }
        models.push(learners::fit(
            &config.nuisances.outcome,
            z.select(Axis(0), &rows).view(),
            &y,
            None,
            Task::Regression,
            seed::derive(seed, &[seed::PLUGIN, u64::from(arm)]),
        )?);
    }
    let mu1 = models.pop().unwrap();
    let mu0 = models.pop().unwrap();
    Ok(Fit::Plugin { mu0, mu1 })
}

/// Fits `variant` on `data` reusing precomputed nuisances.
pub fn estimate_with_bundle(
    variant: Variant,
    config: &PipelineConfig,
    data: &Dataset,
    bundle: &NuisanceBundle,
    seed: u64,
) -> Result<CateModel> {
    let x = data.x_matrix();
    let fit = if variant.learner == CateLearner::T {
        fit_t_learner(variant, data, config, Some(bundle), seed)?
    } else {
        let s1 = stage_one(variant, data, bundle, &config.sieve, None, None)?;
        Fit::Stage2(stage_two(&config.stage2, x.view(), &s1.pseudo, seed)?)
    };
    Ok(CateModel {
        variant,
        seed,
        x_dim: x.ncols(),
        folds: Some(bundle.folds.clone()),
        fit,
    })
}

/// Runs the full pipeline for one cross-fitting seed.
pub fn estimate_cate(spec: &MetaLearnerSpec, data: &Dataset, seed: u64) -> Result<CateModel> {
    spec.validate()?;
    let variant = spec.variant()?;
    if variant.learner == CateLearner::T && variant.policy == MissingPolicy::Ac {
        let fit = fit_t_learner(variant, data, &spec.pipeline, None, seed)?;
        return Ok(CateModel {
            variant,
            seed,
            x_dim: data.x_matrix().ncols(),
            folds: None,
            fit,
        });
    }
    if variant.learner == CateLearner::T {
        require_x_equals_z(data)?;
    }
    let bundle = fit_nuisance_bundle(data, &spec.pipeline, variant.needs_imputation(), seed)?;
    estimate_with_bundle(variant, &spec.pipeline, data, &bundle, seed)
}

/// Per-seed predictions and their row-wise median.
#[derive(Clone, Debug, PartialEq)]
pub struct MedianEstimate {
    pub seeds: Vec<u64>,
    pub per_seed: Vec<Vec<f64>>,
    pub median: Vec<f64>,
}

/// Row-wise median over per-seed prediction vectors.
pub fn median_rows(per_seed: &[Vec<f64>]) -> Vec<f64> {
    let m = per_seed.first().map_or(0, Vec::len);
    let mut buf = Vec::with_capacity(per_seed.len());
    (0..m)
        .map(|j| {
            buf.clear();
            buf.extend(per_seed.iter().map(|v| v[j]));
            median(&buf)
        })
        .collect()
}

/// Fits once per seed and takes the row-wise median of the predictions on
/// `eval_x`. Failing seeds are dropped with a warning.
pub fn median_aggregate(
    spec: &MetaLearnerSpec,
    data: &Dataset,
    seeds: &[u64],
    eval_x: ArrayView2<'_, f64>,
) -> Result<MedianEstimate> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("median aggregation needs at least one seed".into()));
    }
    let mut kept = Vec::new();
    let mut per_seed = Vec::new();
    let mut last_err = String::new();
    for &s in seeds {
        match estimate_cate(spec, data, s).and_then(|m| predict_cate(&m, eval_x)) {
            Ok(p) => {
                kept.push(s);
                per_seed.push(p);
            }
            Err(e) if e.is_input_error() => return Err(e),
            Err(e) => {
                log::warn!("seed {s} failed and is dropped: {e}");
                last_err = e.to_string();
            }
        }
    }
    if per_seed.is_empty() {
        return Err(Error::AllSeedsFailed(last_err));
    }
    let median = median_rows(&per_seed);
    Ok(MedianEstimate {
        seeds: kept,
        per_seed,
        median,
    })
}

/// Convenience: `X` rows of a dataset as an owned matrix.
pub fn x_of(data: &Dataset) -> Array2<f64> {
    data.x_matrix()
}
