//! Replicated simulation study over DGPs, learner variants and sample sizes.

use std::collections::BTreeMap;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{half_sample_bootstrap, MIN_DRAWS};
use crate::error::{Error, Result};
use crate::meta::{estimate_with_bundle, fit_nuisance_bundle, predict_cate, CateLearner, PipelineConfig, Variant};
use crate::seed;

use super::dgp::{draw, DgpId, Draw};
use super::metrics::{coverage_summary, rmse, rmse_mean, rmsme, CoverageSummary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Rmsme,
    RmseMean,
    Coverage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    #[serde(default = "BootstrapConfig::default_draws")]
    pub draws: usize,
    #[serde(default = "BootstrapConfig::default_alpha")]
    pub alpha: f64,
}

impl BootstrapConfig {
    fn default_draws() -> usize {
        100
    }
    fn default_alpha() -> f64 {
        0.05
    }
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            draws: Self::default_draws(),
            alpha: Self::default_alpha(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub dgps: Vec<DgpId>,
    pub learners: Vec<Variant>,
    pub sizes: Vec<usize>,
    #[serde(default = "StudyConfig::default_replicates")]
    pub replicates: usize,
    #[serde(default = "StudyConfig::default_test_size")]
    pub test_size: usize,
    #[serde(default = "StudyConfig::default_metrics")]
    pub metrics: Vec<Metric>,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub bootstrap: Option<BootstrapConfig>,
    /// Worker threads; the global default when absent.
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl StudyConfig {
    fn default_replicates() -> usize {
        100
    }
    fn default_test_size() -> usize {
        2000
    }
    fn default_metrics() -> Vec<Metric> {
        vec![Metric::Rmsme, Metric::RmseMean]
    }

    pub fn new(dgps: Vec<DgpId>, learners: Vec<Variant>, sizes: Vec<usize>) -> Self {
        Self {
            dgps,
            learners,
            sizes,
            replicates: Self::default_replicates(),
            test_size: Self::default_test_size(),
            metrics: Self::default_metrics(),
            pipeline: PipelineConfig::default(),
            bootstrap: None,
            threads: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let empty = [
            ("dgps", self.dgps.is_empty()),
            ("learners", self.learners.is_empty()),
            ("sizes", self.sizes.is_empty()),
            ("metrics", self.metrics.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::Config(format!("`{name}` must not be empty")));
        }
        if self.replicates == 0 {
            return Err(Error::Config("`replicates` must be at least 1".into()));
        }
        if self.test_size == 0 || self.sizes.contains(&0) {
            return Err(Error::Config("`sizes` and `test_size` must be positive".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("`threads` must be positive".into()));
        }
        if self.metrics.contains(&Metric::Coverage) {
            let Some(b) = &self.bootstrap else {
                return Err(Error::Config("`coverage` metric needs a `bootstrap` section".into()));
            };
            if b.draws < MIN_DRAWS || !(b.alpha > 0.0 && b.alpha < 1.0) {
                return Err(Error::Config(format!(
                    "`bootstrap` needs draws >= {MIN_DRAWS} and alpha in (0, 1)"
                )));
            }
            if self.learners.iter().any(|v| v.learner == CateLearner::T) {
                return Err(Error::Config("`coverage` is unavailable for the T-learner".into()));
            }
        }
        self.pipeline.validate()
    }
}

/// Seed of replicate `r` at size `n`: independent of the learner list.
pub fn replicate_seed(master: u64, dgp: DgpId, n: usize, r: usize) -> u64 {
    seed::derive(master, &[seed::label(dgp.as_str()), n as u64, r as u64])
}

/// The single fully observed test draw shared by every cell of a DGP.
pub fn test_draw(master: u64, dgp: DgpId, test_size: usize) -> Result<Draw> {
    draw(dgp, test_size, seed::derive(master, &[seed::label(dgp.as_str()), seed::TEST_SET]), false)
}

pub fn training_draw(master: u64, dgp: DgpId, n: usize, r: usize) -> Result<Draw> {
    let s = seed::derive(replicate_seed(master, dgp, n, r), &[seed::DATA]);
    draw(dgp, n, s, dgp.has_missingness())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub n: usize,
    pub rmsme: Option<f64>,
    pub rmse_mean: Option<f64>,
    pub coverage: Option<CoverageSummary>,
    pub succeeded: usize,
    pub failed: usize,
    /// Per-replicate test RMSE; `None` for failed replicates.
    pub replicate_rmse: Vec<Option<f64>>,
    pub failures: Vec<ReplicateFailure>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerReport {
    pub learner: Variant,
    pub sizes: Vec<SizeReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgpReport {
    pub dgp: DgpId,
    pub learners: Vec<LearnerReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub seed: u64,
    pub replicates: usize,
    pub test_size: usize,
    pub dgps: Vec<DgpReport>,
}

/// Outcome of one replicate for one learner.
type Cell = std::result::Result<(Vec<f64>, Option<(Vec<f64>, Vec<f64>)>), String>;

fn run_replicate(config: &StudyConfig, dgp: DgpId, n: usize, r: usize, test_x: &Array2<f64>) -> Vec<Cell> {
    let fail_all = |e: Error| vec![Err(e.to_string()); config.learners.len()];
    let rs = replicate_seed(config.seed, dgp, n, r);
    let train = match training_draw(config.seed, dgp, n, r) {
        Ok(t) => t,
        Err(e) => return fail_all(e),
    };
    let imputation = config.learners.iter().any(|v| v.needs_imputation());
    let bundle = match fit_nuisance_bundle(&train.data, &config.pipeline, imputation, rs) {
        Ok(b) => b,
        Err(e) => {
            log::warn!("{} n={n} replicate {r}: nuisance fit failed: {e}", dgp.as_str());
            return fail_all(e);
        }
    };
    let coverage = config.metrics.contains(&Metric::Coverage);
    config
        .learners
        .iter()
        .map(|&variant| {
            let run = || -> Result<(Vec<f64>, Option<(Vec<f64>, Vec<f64>)>)> {
                let model = estimate_with_bundle(variant, &config.pipeline, &train.data, &bundle, rs)?;
                let pred = predict_cate(&model, test_x.view())?;
                let band = match (&config.bootstrap, coverage) {
                    (Some(b), true) => {
                        let band = half_sample_bootstrap(
                            variant,
                            &config.pipeline,
                            &train.data,
                            &bundle,
                            b.draws,
                            b.alpha,
                            test_x.view(),
                            rs,
                        )?;
                        Some((band.lower, band.upper))
                    }
                    _ => None,
                };
                Ok((pred, band))
            };
            run().map_err(|e| {
                log::warn!("{} {variant} n={n} replicate {r} failed: {e}", dgp.as_str());
                e.to_string()
            })
        })
        .collect()
}

fn summarise(config: &StudyConfig, n: usize, cells: Vec<Cell>, truth: &[f64]) -> Result<SizeReport> {
    let mut estimates = Vec::new();
    let mut bands = Vec::new();
    let mut replicate_rmse = Vec::with_capacity(cells.len());
    let mut failures = Vec::new();
    for (r, cell) in cells.into_iter().enumerate() {
        match cell {
            Ok((pred, band)) => {
                replicate_rmse.push(Some(rmse(&pred, truth)));
                estimates.push(pred);
                bands.extend(band);
            }
            Err(error) => {
                replicate_rmse.push(None);
                failures.push(ReplicateFailure { replicate: r, error });
            }
        }
    }
    let ok = !estimates.is_empty();
    let want = |m: Metric| ok && config.metrics.contains(&m);
    Ok(SizeReport {
        n,
        rmsme: want(Metric::Rmsme).then(|| rmsme(&estimates, truth)).transpose()?,
        rmse_mean: want(Metric::RmseMean).then(|| rmse_mean(&estimates, truth)).transpose()?,
        coverage: (want(Metric::Coverage) && !bands.is_empty())
            .then(|| coverage_summary(&bands, truth))
            .transpose()?,
        succeeded: estimates.len(),
        failed: failures.len(),
        replicate_rmse,
        failures,
    })
}

fn run_all(config: &StudyConfig) -> Result<StudyReport> {
    let mut dgps = Vec::with_capacity(config.dgps.len());
    for &dgp in &config.dgps {
        let test = test_draw(config.seed, dgp, config.test_size)?;
        let test_x = test.data.x_matrix();
        let jobs: Vec<(usize, usize)> = config
            .sizes
            .iter()
            .flat_map(|&n| (0..config.replicates).map(move |r| (n, r)))
            .collect();
        let results: Vec<Vec<Cell>> = jobs
            .par_iter()
            .map(|&(n, r)| run_replicate(config, dgp, n, r, &test_x))
            .collect();
        // Keyed by (learner, n) so aggregation ignores completion order.
        let mut grouped: BTreeMap<(usize, usize), Vec<Cell>> = BTreeMap::new();
        for (&(n, _), cells) in jobs.iter().zip(results) {
            for (v, cell) in cells.into_iter().enumerate() {
                grouped.entry((v, n)).or_default().push(cell);
            }
        }
        let mut learners = Vec::with_capacity(config.learners.len());
        for (v, &learner) in config.learners.iter().enumerate() {
            let sizes = config
                .sizes
                .iter()
                .map(|&n| summarise(config, n, grouped.remove(&(v, n)).unwrap_or_default(), &test.truth.theta))
                .collect::<Result<Vec<_>>>()?;
            learners.push(LearnerReport { learner, sizes });
        }
        dgps.push(DgpReport { dgp, learners });
    }
    Ok(StudyReport {
        seed: config.seed,
        replicates: config.replicates,
        test_size: config.test_size,
        dgps,
    })
}

/// Runs every (DGP, size, replicate) job, sharing one nuisance fit across
/// the learners of a replicate. The report does not depend on the number
/// of worker threads.
pub fn run_study(config: &StudyConfig) -> Result<StudyReport> {
    config.validate()?;
    match config.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?
            .install(|| run_all(config)),
        None => run_all(config),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl StudyReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per (dgp, learner, n).
    pub fn to_flat_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "dgp",
            "learner",
            "n",
            "rmsme",
            "rmse_mean",
            "coverage_mean",
            "coverage_median",
            "coverage_sd",
            "coverage_min",
            "coverage_max",
            "succeeded",
            "failed",
        ])?;
        for d in &self.dgps {
            for l in &d.learners {
                for s in &l.sizes {
                    let c = s.coverage.as_ref();
                    w.write_record([
                        d.dgp.as_str().to_string(),
                        l.learner.to_string(),
                        s.n.to_string(),
                        fmt_opt(s.rmsme),
                        fmt_opt(s.rmse_mean),
                        fmt_opt(c.map(|c| c.mean)),
                        fmt_opt(c.map(|c| c.median)),
                        fmt_opt(c.map(|c| c.sd)),
                        fmt_opt(c.map(|c| c.min)),
                        fmt_opt(c.map(|c| c.max)),
                        s.succeeded.to_string(),
                        s.failed.to_string(),
                    ])?;
                }
            }
        }
        into_string(w)
    }

    /// RMSME with learners as rows and sample sizes as columns.
    pub fn rmsme_table(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let sizes: Vec<usize> = self
            .dgps
            .first()
            .and_then(|d| d.learners.first())
            .map(|l| l.sizes.iter().map(|s| s.n).collect())
            .unwrap_or_default();
        let mut header = vec!["dgp".to_string(), "learner".to_string()];
        header.extend(sizes.iter().map(|n| format!("n{n}")));
        w.write_record(&header)?;
        for d in &self.dgps {
            for l in &d.learners {
                let mut row = vec![d.dgp.as_str().to_string(), l.learner.to_string()];
                row.extend(l.sizes.iter().map(|s| fmt_opt(s.rmsme)));
                w.write_record(&row)?;
            }
        }
        into_string(w)
    }

    pub fn cell(&self, dgp: DgpId, learner: Variant, n: usize) -> Option<&SizeReport> {
        self.dgps
            .iter()
            .find(|d| d.dgp == dgp)?
            .learners
            .iter()
            .find(|l| l.learner == learner)?
            .sizes
            .iter()
            .find(|s| s.n == n)
    }
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Mean absolute CATE error of the T- and DR-learners per `|Z_1|` bin on
/// the binary illustration, where one arm becomes rare as `|Z_1|` grows.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegionComparison {
    pub edges: Vec<f64>,
    pub t_mae: Vec<f64>,
    pub dr_mae: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn compare_t_and_dr(
    n: usize,
    replicates: usize,
    test_size: usize,
    pipeline: &PipelineConfig,
    bins: usize,
    master: u64,
) -> Result<RegionComparison> {
    let dgp = DgpId::NullEffect;
    let test = test_draw(master, dgp, test_size)?;
    let x = test.data.x_matrix();
    let t = Variant::new(CateLearner::T, crate::meta::MissingPolicy::Ac)?;
    let dr = Variant::new(CateLearner::Dr, crate::meta::MissingPolicy::Ac)?;
    let per_rep: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let train = training_draw(master, dgp, n, r)?;
            let rs = replicate_seed(master, dgp, n, r);
            let bundle = fit_nuisance_bundle(&train.data, pipeline, false, rs)?;
            let pt = predict_cate(&estimate_with_bundle(t, pipeline, &train.data, &bundle, rs)?, x.view())?;
            let pd = predict_cate(&estimate_with_bundle(dr, pipeline, &train.data, &bundle, rs)?, x.view())?;
            Ok((pt, pd))
        })
        .collect();
    let edges: Vec<f64> = (0..=bins).map(|b| b as f64 / bins as f64).collect();
    let bin_of = |v: f64| ((v.abs() * bins as f64) as usize).min(bins - 1);
    let (mut t_sum, mut dr_sum, mut counts) = (vec![0.0; bins], vec![0.0; bins], vec![0usize; bins]);
    for rep in per_rep {
        let (pt, pd) = rep?;
        for j in 0..test.data.n() {
            let b = bin_of(test.data.covariates()[[j, 0]]);
            t_sum[b] += (pt[j] - test.truth.theta[j]).abs();
            dr_sum[b] += (pd[j] - test.truth.theta[j]).abs();
            counts[b] += 1;
        }
    }
    let avg = |s: Vec<f64>| s.iter().zip(&counts).map(|(v, &c)| if c > 0 { v / c as f64 } else { f64::NAN }).collect();
    Ok(RegionComparison {
        edges,
        t_mae: avg(t_sum),
        dr_mae: avg(dr_sum),
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::LearnerSpec;
    use crate::meta::MissingPolicy;
    use crate::nuisance::NuisanceSpecs;

    fn tiny() -> StudyConfig {
        let mut c = StudyConfig::new(
            vec![DgpId::Dgp1],
            vec![Variant::new(CateLearner::Mdr, MissingPolicy::Native).unwrap()],
            vec![200],
        );
        c.replicates = 1;
        c.test_size = 50;
        c.pipeline.nuisances = NuisanceSpecs::uniform(LearnerSpec::forest(10, 20));
        c.pipeline.stage2 = LearnerSpec::forest(20, 10);
        c.pipeline.folds = 3;
        c.seed = 3;
        c
    }

    #[test]
    fn single_replicate_single_cell() {
        let report = run_study(&tiny()).unwrap();
        assert_eq!(report.dgps.len(), 1);
        let cell = &report.dgps[0].learners[0].sizes[0];
        assert_eq!((cell.succeeded, cell.failed), (1, 0));
        assert_eq!(cell.replicate_rmse.len(), 1);
        assert!((cell.rmsme.unwrap() - cell.replicate_rmse[0].unwrap()).abs() < 1e-12);
        let table = report.rmsme_table().unwrap();
        assert!(table.starts_with("dgp,learner,n200\ndgp1,mdr-native,"));
    }

    #[test]
    fn validation_names_fields() {
        let mut c = tiny();
        c.sizes.clear();
        assert!(c.validate().unwrap_err().to_string().contains("sizes"));
        let mut c = tiny();
        c.metrics.push(Metric::Coverage);
        assert!(c.validate().unwrap_err().to_string().contains("bootstrap"));
        let bad = r#"{"dgps":["dgp9"],"learners":["mdr-native"],"sizes":[10]}"#;
        assert!(serde_json::from_str::<StudyConfig>(bad).is_err());
    }

    #[test]
    fn replicate_seeds_ignore_learner_list() {
        let a = training_draw(1, DgpId::Dgp1, 100, 2).unwrap();
        let b = training_draw(1, DgpId::Dgp1, 100, 2).unwrap();
        assert_eq!(a.data, b.data);
        assert_ne!(replicate_seed(1, DgpId::Dgp1, 100, 2), replicate_seed(1, DgpId::Dgp1, 100, 3));
    }
}
