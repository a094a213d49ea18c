//! Observational data containers, fold assignment, and CSV ingestion.
//!
//! A [`Dataset`] holds `n` rows of `(Z, A, C, Y)`: covariates, a binary
//! treatment, a binary indicator that the outcome was observed, and the
//! outcome itself, present exactly when `C = 1`. A designated subset of the
//! covariate columns (`X`) is where treatment-effect heterogeneity is
//! modelled.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    covariates: Array2<f64>,
    treatment: Vec<bool>,
    observed: Vec<bool>,
    outcome: Vec<Option<f64>>,
    heterogeneity_index: Vec<usize>,
    covariate_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        covariates: Array2<f64>,
        treatment: Vec<bool>,
        observed: Vec<bool>,
        outcome: Vec<Option<f64>>,
        heterogeneity_index: Vec<usize>,
    ) -> Result<Self> {
        let (n, p) = covariates.dim();
        if n == 0 {
            return Err(Error::InvalidArgument("dataset has no rows".into()));
        }
        if p == 0 {
            return Err(Error::InvalidArgument("dataset has no covariates".into()));
        }
        if treatment.len() != n || observed.len() != n || outcome.len() != n {
            return Err(Error::InvalidArgument(format!(
                "column lengths differ: covariates {n}, treatment {}, missingness {}, outcome {}",
                treatment.len(),
                observed.len(),
                outcome.len()
            )));
        }
        if heterogeneity_index.is_empty() {
            return Err(Error::InvalidArgument(
                "heterogeneity index must name at least one covariate".into(),
            ));
        }
        if let Some(&j) = heterogeneity_index.iter().find(|&&j| j >= p) {
            return Err(Error::InvalidArgument(format!(
                "heterogeneity index {j} out of range for {p} covariates"
            )));
        }
        for (i, row) in covariates.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schema {
                    row: i,
                    message: "non-finite covariate value".into(),
                });
            }
        }
        for (i, (&c, y)) in observed.iter().zip(&outcome).enumerate() {
            match (c, y) {
                (true, None) => {
                    return Err(Error::Schema {
                        row: i,
                        message: "outcome missing for observed row".into(),
                    })
                }
                (false, Some(_)) => {
                    return Err(Error::Schema {
                        row: i,
                        message: "outcome recorded for censored row".into(),
                    })
                }
                (true, Some(v)) if !v.is_finite() => {
                    return Err(Error::Schema {
                        row: i,
                        message: "non-finite outcome".into(),
                    })
                }
                _ => {}
            }
        }
        let covariate_names = (0..p).map(|j| format!("z{}", j + 1)).collect();
        Ok(Self {
            covariates,
            treatment,
            observed,
            outcome,
            heterogeneity_index,
            covariate_names,
        })
    }

    pub fn with_covariate_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.p() {
            return Err(Error::InvalidArgument(format!(
                "{} covariate names for {} columns",
                names.len(),
                self.p()
            )));
        }
        self.covariate_names = names;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn p(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn covariates(&self) -> ArrayView2<'_, f64> {
        self.covariates.view()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn treatment(&self) -> &[bool] {
        &self.treatment
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    pub fn outcome(&self) -> &[Option<f64>] {
        &self.outcome
    }

    pub fn heterogeneity_index(&self) -> &[usize] {
        &self.heterogeneity_index
    }

    /// Treatment as a 0/1 real.
    pub fn a(&self, i: usize) -> f64 {
        f64::from(u8::from(self.treatment[i]))
    }

    /// Missingness indicator as a 0/1 real.
    pub fn c(&self, i: usize) -> f64 {
        f64::from(u8::from(self.observed[i]))
    }

    /// True when `X` covers every covariate column, i.e. `X = Z`.
    pub fn x_covers_z(&self) -> bool {
        (0..self.p()).all(|j| self.heterogeneity_index.contains(&j))
    }

    /// The heterogeneity covariates `X` as an `n x |X|` matrix.
    pub fn x_matrix(&self) -> Array2<f64> {
        self.covariates.select(Axis(1), &self.heterogeneity_index)
    }

    /// `[A, Z]` design used by the pooled missingness and imputation models.
    pub fn treatment_and_covariates(&self) -> Array2<f64> {
        let (n, p) = self.covariates.dim();
        let mut out = Array2::zeros((n, p + 1));
        for i in 0..n {
            out[[i, 0]] = self.a(i);
            for j in 0..p {
                out[[i, j + 1]] = self.covariates[[i, j]];
            }
        }
        out
    }

    pub fn complete_cases(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.observed[i]).collect()
    }

    pub fn fraction_observed(&self) -> f64 {
        self.observed.iter().filter(|&&c| c).count() as f64 / self.n() as f64
    }

    /// Row subset in the given order.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            covariates: self.covariates.select(Axis(0), rows),
            treatment: rows.iter().map(|&i| self.treatment[i]).collect(),
            observed: rows.iter().map(|&i| self.observed[i]).collect(),
            outcome: rows.iter().map(|&i| self.outcome[i]).collect(),
            heterogeneity_index: self.heterogeneity_index.clone(),
            covariate_names: self.covariate_names.clone(),
        }
    }

    /// Same rows with every outcome filled in from `completed` and `C = 1`.
    pub fn with_completed_outcomes(&self, completed: &[f64]) -> Result<Dataset> {
        if completed.len() != self.n() {
            return Err(Error::InvalidArgument(format!(
                "{} completed outcomes for {} rows",
                completed.len(),
                self.n()
            )));
        }
        Dataset::new(
            self.covariates.clone(),
            self.treatment.clone(),
            vec![true; self.n()],
            completed.iter().map(|&y| Some(y)).collect(),
            self.heterogeneity_index.clone(),
        )?
        .with_covariate_names(self.covariate_names.clone())
    }
}

/// Random balanced partition of `n` rows into `k` folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    fold_of: Vec<usize>,
    k: usize,
    seed: u64,
}

impl FoldAssignment {
    pub fn fold_of(&self) -> &[usize] {
        &self.fold_of
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n(&self) -> usize {
        self.fold_of.len()
    }

    /// Rows of fold `fold`, ascending.
    pub fn rows_in(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    /// Rows outside fold `fold`, ascending.
    pub fn rows_outside(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.fold_of[i] != fold).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }
}

pub fn assign_folds(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("fold count {k} must be at least 2")));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "fold count {k} exceeds row count {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed));
    let mut fold_of = vec![0; n];
    for (pos, &row) in order.iter().enumerate() {
        fold_of[row] = pos % k;
    }
    Ok(FoldAssignment { fold_of, k, seed })
}

/// Binds CSV columns to their roles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub treatment_col: String,
    pub missing_col: String,
    pub outcome_col: String,
    /// Covariate columns `Z`; every other column when absent.
    #[serde(default)]
    pub covariate_cols: Option<Vec<String>>,
    /// Heterogeneity columns `X`; all of `Z` when absent.
    #[serde(default)]
    pub x_cols: Option<Vec<String>>,
}

impl CsvSchema {
    pub fn new(treatment: &str, missing: &str, outcome: &str) -> Self {
        Self {
            treatment_col: treatment.into(),
            missing_col: missing.into(),
            outcome_col: outcome.into(),
            covariate_cols: None,
            x_cols: None,
        }
    }
}

fn parse_binary(raw: &str, row: usize, column: &str) -> Result<bool> {
    let parse_err = |message: String| Error::Parse {
        row,
        column: column.to_string(),
        message,
    };
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| parse_err(format!("expected 0 or 1, found `{raw}`")))?;
    if v == 0.0 {
        Ok(false)
    } else if v == 1.0 {
        Ok(true)
    } else {
        Err(parse_err(format!("expected 0 or 1, found `{raw}`")))
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    read_csv(File::open(path)?, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let position: HashMap<&str, usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.as_str(), i))
        .collect();
    let find = |name: &str| {
        position
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("column `{name}` not found in CSV header")))
    };
    let a_col = find(&schema.treatment_col)?;
    let c_col = find(&schema.missing_col)?;
    let y_col = find(&schema.outcome_col)?;
    let z_names: Vec<String> = match &schema.covariate_cols {
        Some(cols) => cols.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| ![a_col, c_col, y_col].contains(i))
            .map(|(_, h)| h.clone())
            .collect(),
    };
    if z_names.is_empty() {
        return Err(Error::Config("schema names no covariate columns".into()));
    }
    let z_cols = z_names
        .iter()
        .map(|n| find(n))
        .collect::<Result<Vec<_>>>()?;
    let x_index = match &schema.x_cols {
        Some(cols) => cols
            .iter()
            .map(|name| {
                z_names.iter().position(|z| z == name).ok_or_else(|| {
                    Error::Config(format!("x column `{name}` is not a covariate column"))
                })
            })
            .collect::<Result<Vec<_>>>()?,
        None => (0..z_names.len()).collect(),
    };

    let mut z = Vec::new();
    let mut a = Vec::new();
    let mut c = Vec::new();
    let mut y = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let field = |col: usize| record.get(col).unwrap_or("");
        for (&col, name) in z_cols.iter().zip(&z_names) {
            let raw = field(col);
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                row,
                column: name.clone(),
                message: format!("expected a number, found `{raw}`"),
            })?;
            z.push(v);
        }
        a.push(parse_binary(field(a_col), row, &schema.treatment_col)?);
        let observed = parse_binary(field(c_col), row, &schema.missing_col)?;
        c.push(observed);
        let raw_y = field(y_col);
        let outcome = if raw_y.is_empty() {
            None
        } else {
            Some(raw_y.parse::<f64>().map_err(|_| Error::Parse {
                row,
                column: schema.outcome_col.clone(),
                message: format!("expected a number or empty cell, found `{raw_y}`"),
            })?)
        };
        y.push(outcome);
    }
    let n = a.len();
    if n == 0 {
        return Err(Error::Config("CSV contains no data rows".into()));
    }
    let covariates = Array2::from_shape_vec((n, z_names.len()), z)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Dataset::new(covariates, a, c, y, x_index)?.with_covariate_names(z_names)
}

/// Writes covariates, then `a`, `c`, `y` columns. Missing outcomes are empty
/// cells; numbers use the shortest representation that round-trips.
pub fn write_csv<W: Write>(data: &Dataset, writer: W, schema: &CsvSchema) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = data.covariate_names().to_vec();
    header.push(schema.treatment_col.clone());
    header.push(schema.missing_col.clone());
    header.push(schema.outcome_col.clone());
    wtr.write_record(&header)?;
    for i in 0..data.n() {
        let mut record: Vec<String> = data.covariates.row(i).iter().map(|v| v.to_string()).collect();
        record.push(u8::from(data.treatment[i]).to_string());
        record.push(u8::from(data.observed[i]).to_string());
        record.push(data.outcome[i].map(|v| v.to_string()).unwrap_or_default());
        wtr.write_record(&record)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> CsvSchema {
        CsvSchema::new("a", "c", "y")
    }

    #[test]
    fn loads_missing_outcomes_as_absent() {
        let csv = "z1,a,c,y\n0.5,1,1,2.0\n0.1,0,0,\n-0.3,1,1,1.5\n";
        let data = read_csv(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(data.n(), 3);
        assert_eq!(data.outcome(), &[Some(2.0), None, Some(1.5)]);
        assert_eq!(data.complete_cases(), vec![0, 2]);
    }

    #[test]
    fn outcome_on_censored_row_is_rejected() {
        let csv = "z1,a,c,y\n0.5,1,1,2.0\n0.1,0,0,3.1\n";
        let err = read_csv(csv.as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, Error::Schema { row: 1, .. }));
        assert!(err.to_string().contains("outcome recorded for censored row"));
    }

    #[test]
    fn missing_outcome_on_observed_row_is_rejected() {
        let csv = "z1,a,c,y\n0.5,1,1,\n";
        let err = read_csv(csv.as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, Error::Schema { row: 0, .. }));
    }

    #[test]
    fn non_binary_treatment_names_row_and_column() {
        let csv = "z1,a,c,y\n0.5,1,1,2.0\n0.1,2,1,1.0\n";
        match read_csv(csv.as_bytes(), &schema()).unwrap_err() {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 1);
                assert_eq!(column, "a");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn x_cols_select_subset() {
        let csv = "z1,z2,a,c,y\n0.5,1.0,1,1,2.0\n0.1,2.0,0,1,1.0\n";
        let mut s = schema();
        s.x_cols = Some(vec!["z2".into()]);
        let data = read_csv(csv.as_bytes(), &s).unwrap();
        assert_eq!(data.heterogeneity_index(), &[1]);
        assert_eq!(data.x_matrix().column(0).to_vec(), vec![1.0, 2.0]);
        assert!(!data.x_covers_z());
    }

    #[test]
    fn folds_one_per_row_when_k_equals_n() {
        let f = assign_folds(10, 10, 7).unwrap();
        assert!(f.sizes().iter().all(|&s| s == 1));
    }

    #[test]
    fn folds_balanced_with_remainder() {
        let f = assign_folds(11, 10, 7).unwrap();
        let mut sizes = f.sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![1, 1, 1, 1, 1, 1, 1, 1, 1, 2]);
    }

    #[test]
    fn folds_are_deterministic() {
        assert_eq!(assign_folds(10, 10, 7).unwrap(), assign_folds(10, 10, 7).unwrap());
        assert_ne!(
            assign_folds(100, 10, 7).unwrap().fold_of(),
            assign_folds(100, 10, 8).unwrap().fold_of()
        );
    }

    #[test]
    fn too_many_folds_is_an_error() {
        assert!(assign_folds(5, 6, 0).is_err());
        assert!(assign_folds(5, 1, 0).is_err());
    }
}
