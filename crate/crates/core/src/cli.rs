//! Command-line front end: `estimate`, `simulate` and `bootstrap`.
//!
//! Each command reads one JSON config document; flags override its
//! top-level fields. Outputs are computed in full before anything is
//! written, and every file is written through a temporary file and an
//! atomic rename.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bootstrap::half_sample_bootstrap;
use crate::data::{load_csv, CsvSchema, Dataset};
use crate::error::{Error, Result};
use crate::longitudinal::{estimate_cate_longitudinal, load_panel_csv, PanelOptions, PanelSpec};
use crate::meta::{
    estimate_with_bundle, fit_nuisance_bundle, median_aggregate, median_rows, predict_cate, CateLearner,
    MetaLearnerSpec, MissingPolicy,
};
use crate::sim::study::{run_study, StudyConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "misscate", version, about = "CATE estimation with missing outcomes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a CATE learner on a CSV file and write per-row estimates.
    Estimate(CommonArgs),
    /// Run a replicated simulation study.
    Simulate(CommonArgs),
    /// Half-sample bootstrap confidence bands for a fitted learner.
    Bootstrap(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
    /// Input CSV; overrides the config's `input`.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    treatment_col: Option<String>,
    #[arg(long)]
    missing_col: Option<String>,
    #[arg(long)]
    outcome_col: Option<String>,
    #[arg(long, value_delimiter = ',')]
    x_cols: Option<Vec<String>>,
    #[arg(long)]
    replicates: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    pub input: PathBuf,
    #[serde(default)]
    pub schema: Option<CsvSchema>,
    pub spec: MetaLearnerSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
    /// Present for wide-format panel input.
    #[serde(default)]
    pub panel: Option<PanelOptions>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapRunConfig {
    pub input: PathBuf,
    #[serde(default)]
    pub schema: Option<CsvSchema>,
    pub spec: MetaLearnerSpec,
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
}

fn default_draws() -> usize {
    100
}

fn default_alpha() -> f64 {
    0.05
}

fn default_schema() -> CsvSchema {
    CsvSchema::new("a", "c", "y")
}

/// Parses arguments, runs the command and returns the process exit code.
/// Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Estimate(a) => cmd_estimate(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Bootstrap(a) => cmd_bootstrap(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                EXIT_INPUT
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config `{}`: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("`{}`: {e}", path.display())))
}

/// Config-relative paths are resolved against the config's directory;
/// a flag value is taken as given.
fn resolve_input(args: &CommonArgs, from_config: &Path) -> Result<PathBuf> {
    let path = match &args.input {
        Some(p) => p.clone(),
        None if from_config.is_relative() => {
            args.config.parent().unwrap_or(Path::new(".")).join(from_config)
        }
        None => from_config.to_path_buf(),
    };
    if !path.exists() {
        return Err(Error::Config(format!("input file `{}` does not exist", path.display())));
    }
    Ok(path)
}

fn apply_schema_flags(schema: Option<CsvSchema>, args: &CommonArgs) -> CsvSchema {
    let mut s = schema.unwrap_or_else(default_schema);
    if let Some(v) = &args.treatment_col {
        s.treatment_col = v.clone();
    }
    if let Some(v) = &args.missing_col {
        s.missing_col = v.clone();
    }
    if let Some(v) = &args.outcome_col {
        s.outcome_col = v.clone();
    }
    if let Some(v) = &args.x_cols {
        s.x_cols = Some(v.clone());
    }
    s
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match threads {
        Some(0) => Err(Error::Config("`threads` must be positive".into())),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?
            .install(f),
        None => f(),
    }
}

/// Writes `bytes` to `dir/name` via a temporary file in `dir`.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(dir.join(name)).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn write_all(dir: &Path, files: &[(&str, Vec<u8>)]) -> Result<()> {
    for (name, bytes) in files {
        write_atomic(dir, name, bytes)?;
    }
    Ok(())
}

fn manifest(command: &str, seed: u64, threads: Option<usize>, config: &impl Serialize, outputs: &[&str]) -> Result<Vec<u8>> {
    let doc = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "threads": threads,
        "config": config,
        "outputs": outputs,
    });
    Ok(serde_json::to_vec_pretty(&doc)?)
}

fn csv_bytes(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn cmd_estimate(args: &CommonArgs) -> Result<()> {
    let mut config: EstimateConfig = read_config(&args.config)?;
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if args.threads.is_some() {
        config.threads = args.threads;
    }
    let input = resolve_input(args, &config.input)?;
    config.input = input.clone();
    config.schema = Some(apply_schema_flags(config.schema.take(), args));
    config.spec.validate()?;
    let seeds = if config.spec.seeds.is_empty() {
        vec![config.seed]
    } else {
        config.spec.seeds.clone()
    };
    let schema = config.schema.clone().expect("schema set above");

    let (per_seed, median) = with_threads(config.threads, || match &config.panel {
        Some(options) => {
            if (config.spec.learner, config.spec.missing_policy) != (CateLearner::Mdr, MissingPolicy::Native) {
                return Err(Error::Config("panel input supports only the `mdr` learner with `native` policy".into()));
            }
            let panel = load_panel_csv(&input, schema.x_cols.as_deref())?;
            let spec = PanelSpec {
                pipeline: config.spec.pipeline.clone(),
                options: options.clone(),
            };
            let x = panel.x_matrix();
            let per_seed = seeds
                .iter()
                .map(|&s| predict_cate(&estimate_cate_longitudinal(&panel, &spec, s)?, x.view()))
                .collect::<Result<Vec<_>>>()?;
            let median = median_rows(&per_seed);
            Ok((per_seed, median))
        }
        None => {
            let data = load_csv(&input, &schema)?;
            let est = median_aggregate(&config.spec, &data, &seeds, data.x_matrix().view())?;
            if est.seeds.len() < seeds.len() {
                return Err(Error::AllSeedsFailed(format!(
                    "{} of {} seeds failed",
                    seeds.len() - est.seeds.len(),
                    seeds.len()
                )));
            }
            Ok((est.per_seed, est.median))
        }
    })?;

    let mut header = vec!["row".to_string()];
    header.extend(seeds.iter().map(|s| format!("theta_seed_{s}")));
    header.push("theta_median".into());
    let rows = (0..median.len()).map(|i| {
        let mut r = vec![i.to_string()];
        r.extend(per_seed.iter().map(|p| p[i].to_string()));
        r.push(median[i].to_string());
        r
    });
    let predictions = csv_bytes(&header, rows)?;
    let names = ["predictions.csv", "manifest.json"];
    let man = manifest("estimate", config.seed, config.threads, &config, &names)?;
    write_all(&args.out, &[(names[0], predictions), (names[1], man)])
}

fn cmd_simulate(args: &CommonArgs) -> Result<()> {
    let mut config: StudyConfig = read_config(&args.config)?;
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if args.threads.is_some() {
        config.threads = args.threads;
    }
    if let Some(r) = args.replicates {
        config.replicates = r;
    }
    let report = run_study(&config)?;
    let names = ["report.json", "report.csv", "rmsme_table.csv", "manifest.json"];
    let man = manifest("simulate", config.seed, config.threads, &config, &names)?;
    write_all(
        &args.out,
        &[
            (names[0], report.to_json()?.into_bytes()),
            (names[1], report.to_flat_csv()?.into_bytes()),
            (names[2], report.rmsme_table()?.into_bytes()),
            (names[3], man),
        ],
    )
}

fn cmd_bootstrap(args: &CommonArgs) -> Result<()> {
    let mut config: BootstrapRunConfig = read_config(&args.config)?;
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if args.threads.is_some() {
        config.threads = args.threads;
    }
    let input = resolve_input(args, &config.input)?;
    config.input = input.clone();
    config.schema = Some(apply_schema_flags(config.schema.take(), args));
    config.spec.validate()?;
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(Error::Config(format!("`alpha` must be in (0, 1), got {}", config.alpha)));
    }
    let schema = config.schema.clone().expect("schema set above");
    let variant = config.spec.variant()?;
    let band = with_threads(config.threads, || {
        let data: Dataset = load_csv(&input, &schema)?;
        let pipeline = &config.spec.pipeline;
        let bundle = fit_nuisance_bundle(&data, pipeline, variant.needs_imputation(), config.seed)?;
        // Surfaces unsupported variants before the refits.
        estimate_with_bundle(variant, pipeline, &data, &bundle, config.seed)?;
        let x = data.x_matrix();
        half_sample_bootstrap(variant, pipeline, &data, &bundle, config.draws, config.alpha, x.view(), config.seed)
    })?;

    let header: Vec<String> = ["row", "theta_hat", "lower", "upper", "lambda_hat", "degenerate"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = (0..band.theta_hat.len()).map(|i| {
        vec![
            i.to_string(),
            band.theta_hat[i].to_string(),
            band.lower[i].to_string(),
            band.upper[i].to_string(),
            band.lambda_hat[i].to_string(),
            u8::from(band.degenerate[i]).to_string(),
        ]
    });
    let csv = csv_bytes(&header, rows)?;
    let m = band.theta_hat.len().max(1) as f64;
    let summary = json!({
        "learner": variant.to_string(),
        "alpha": band.alpha,
        "critical_value": band.cv_alpha,
        "draws": band.draws,
        "n": band.n,
        "seed": config.seed,
        "mean_width": band.upper.iter().zip(&band.lower).map(|(u, l)| u - l).sum::<f64>() / m,
        "degenerate_points": band.degenerate.iter().filter(|&&d| d).count(),
    });
    let names = ["band.csv", "summary.json", "manifest.json"];
    let man = manifest("bootstrap", config.seed, config.threads, &config, &names)?;
    write_all(
        &args.out,
        &[(names[0], csv), (names[1], serde_json::to_vec_pretty(&summary)?), (names[2], man)],
    )
}
