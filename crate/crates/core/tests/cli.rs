use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use misscate::data::{write_csv, CsvSchema};
use misscate::learners::LearnerSpec;
use misscate::meta::PipelineConfig;
use misscate::nuisance::{MissingnessModel, NuisanceSpecs};
use misscate::sim::{generate_dgp, DgpId};
use serde_json::{json, Value};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_misscate"))
}

fn quick_pipeline() -> Value {
    serde_json::to_value(PipelineConfig {
        nuisances: NuisanceSpecs {
            propensity: LearnerSpec::ridge_logistic(),
            missingness: LearnerSpec::ridge_logistic(),
            outcome: LearnerSpec::forest(20, 10),
            imputation: LearnerSpec::linear(),
            missingness_model: MissingnessModel::Pooled,
        },
        stage2: LearnerSpec::forest(30, 10),
        folds: 3,
        ..PipelineConfig::default()
    })
    .unwrap()
}

fn write_data(dir: &Path, n: usize) -> PathBuf {
    let (train, _) = generate_dgp(DgpId::Dgp1, n, 10, 21).unwrap();
    let path = dir.join("data.csv");
    write_csv(&train.data, fs::File::create(&path).unwrap(), &CsvSchema::new("a", "c", "y")).unwrap();
    path
}

fn write_json(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_vec_pretty(v).unwrap()).unwrap();
    path
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    bin()
        .arg(cmd)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

fn estimate_config(dir: &Path, seeds: &[u64]) -> PathBuf {
    write_data(dir, 200);
    write_json(
        dir,
        "estimate.json",
        &json!({
            "input": "data.csv",
            "spec": {"learner": "mdr", "missing_policy": "native", "pipeline": quick_pipeline(), "seeds": seeds},
            "seed": 4
        }),
    )
}

#[test]
fn estimate_writes_one_column_per_seed_and_a_median() {
    let dir = TempDir::new().unwrap();
    let config = estimate_config(dir.path(), &[1, 2, 3]);
    let out = dir.path().join("out");
    let o = run("estimate", &config, &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("predictions.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "row,theta_seed_1,theta_seed_2,theta_seed_3,theta_median"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 200);
    for r in rows {
        let v: Vec<f64> = r.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
        let mut s = v[..3].to_vec();
        s.sort_by(f64::total_cmp);
        assert_eq!(v[3], s[1]);
    }
    let manifest: Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "estimate");
    assert_eq!(manifest["seed"], 4);
}

#[test]
fn estimate_is_byte_deterministic() {
    let dir = TempDir::new().unwrap();
    let config = estimate_config(dir.path(), &[]);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run("estimate", &config, &a, &[]).status.success());
    assert!(run("estimate", &config, &b, &["--threads", "1"]).status.success());
    assert_eq!(
        fs::read(a.join("predictions.csv")).unwrap(),
        fs::read(b.join("predictions.csv")).unwrap()
    );
    assert!(fs::read_to_string(a.join("predictions.csv")).unwrap().starts_with("row,theta_seed_4,theta_median\n"));
}

#[test]
fn malformed_input_exits_with_input_code_and_writes_nothing() {
    let dir = TempDir::new().unwrap();
    let config = estimate_config(dir.path(), &[]);
    fs::write(dir.path().join("bad.csv"), "z1,a,c,y\n0.1,1,1,2.0\n0.3,x,1,1.0\n").unwrap();
    let out = dir.path().join("out");
    let o = run("estimate", &config, &out, &["--input", dir.path().join("bad.csv").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("row") && err.contains('a'), "{err}");
    assert!(!out.exists() || fs::read_dir(&out).unwrap().next().is_none());
}

#[test]
fn missing_config_field_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let config = write_json(dir.path(), "c.json", &json!({"input": "data.csv", "spec": {"learner": "mdr"}}));
    let o = run("estimate", &config, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing_policy"));
}

#[test]
fn unknown_dgp_names_the_field() {
    let dir = TempDir::new().unwrap();
    let config = write_json(
        dir.path(),
        "sim.json",
        &json!({"dgps": ["dgp9"], "learners": ["mdr-native"], "sizes": [200]}),
    );
    let o = run("simulate", &config, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("dgp9"), "{err}");
}

#[test]
fn simulate_smoke_run_writes_reports() {
    let dir = TempDir::new().unwrap();
    let config = write_json(
        dir.path(),
        "sim.json",
        &json!({
            "dgps": ["dgp1"], "learners": ["mdr-native", "dr-ac"], "sizes": [200],
            "replicates": 3, "test_size": 100, "pipeline": quick_pipeline(), "seed": 2
        }),
    );
    let out = dir.path().join("out");
    let o = run("simulate", &config, &out, &["--replicates", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.json", "report.csv", "rmsme_table.csv", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let report: Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["replicates"], 1);
    let table = fs::read_to_string(out.join("rmsme_table.csv")).unwrap();
    assert!(table.starts_with("dgp,learner,n200"));
    assert_eq!(table.lines().count(), 3);
}

fn bootstrap_config(dir: &Path, alpha: f64) -> PathBuf {
    write_data(dir, 160);
    write_json(
        dir,
        "boot.json",
        &json!({
            "input": "data.csv",
            "spec": {"learner": "mdr", "missing_policy": "native", "pipeline": quick_pipeline()},
            "draws": 20, "alpha": alpha, "seed": 6
        }),
    )
}

#[test]
fn bootstrap_writes_band_and_summary() {
    let dir = TempDir::new().unwrap();
    let config = bootstrap_config(dir.path(), 0.1);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = run("bootstrap", &config, &a, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run("bootstrap", &config, &b, &[]).status.success());
    let band = fs::read_to_string(a.join("band.csv")).unwrap();
    assert!(band.starts_with("row,theta_hat,lower,upper,lambda_hat,degenerate\n"));
    assert_eq!(band.lines().count(), 161);
    for line in band.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert!(v[2] <= v[1] && v[1] <= v[3]);
    }
    assert_eq!(band, fs::read_to_string(b.join("band.csv")).unwrap());
    let summary: Value = serde_json::from_slice(&fs::read(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["alpha"], 0.1);
    assert_eq!(summary["draws"], 20);
    assert_eq!(summary["learner"], "mdr-native");
}

#[test]
fn bootstrap_rejects_out_of_range_alpha() {
    let dir = TempDir::new().unwrap();
    let config = bootstrap_config(dir.path(), 1.5);
    let o = run("bootstrap", &config, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpha"));
}
