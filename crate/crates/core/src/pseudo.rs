//! Stage-one pseudo-outcomes whose conditional mean given `X` is the CATE
//! when the nuisances are correct.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nuisance::NuisanceEstimates;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PseudoKind {
    Dr,
    Mdr,
    Ep,
    Mep,
    IptwIpcw,
}

/// One value per training row; `None` marks rows excluded by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoOutcomes {
    pub kind: PseudoKind,
    pub values: Vec<Option<f64>>,
}

impl PseudoOutcomes {
    pub fn all(kind: PseudoKind, values: Vec<f64>) -> Self {
        Self {
            kind,
            values: values.into_iter().map(Some).collect(),
        }
    }

    /// Indices and values of the present entries.
    pub fn present(&self) -> (Vec<usize>, Vec<f64>) {
        self.values
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
            .unzip()
    }

    /// Dense vector; panics if any entry is absent.
    pub fn dense(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.expect("absent pseudo-outcome")).collect()
    }
}

fn check(data: &Dataset, nuis: &NuisanceEstimates) -> Result<()> {
    if data.n() != nuis.n() {
        return Err(Error::InvalidArgument(format!(
            "nuisances cover {} rows, data has {}",
            nuis.n(),
            data.n()
        )));
    }
    Ok(())
}

/// DR pseudo-outcome. With `completed = None` it is computed on complete
/// cases only; otherwise on every row with `Y` replaced by `completed`.
pub fn dr_pseudo(
    data: &Dataset,
    nuis: &NuisanceEstimates,
    completed: Option<&[f64]>,
) -> Result<PseudoOutcomes> {
    check(data, nuis)?;
    if let Some(c) = completed {
        if c.len() != data.n() {
            return Err(Error::InvalidArgument("completed outcomes length differs from data".into()));
        }
    }
    let (pi, mu0, mu1, mu_a) = (nuis.pi(), nuis.mu0(), nuis.mu1(), nuis.mu_a());
    let values = (0..data.n())
        .map(|i| {
            let y = match completed {
                Some(c) => c[i],
                None => data.outcome()[i]?,
            };
            let a = data.a(i);
            Some((a - pi[i]) / (pi[i] * (1.0 - pi[i])) * (y - mu_a[i]) + mu1[i] - mu0[i])
        })
        .collect();
    Ok(PseudoOutcomes {
        kind: PseudoKind::Dr,
        values,
    })
}

/// Missingness-aware DR pseudo-outcome, defined on every row. Censored rows
/// contribute exactly `mu1 - mu0`.
pub fn mdr_pseudo(data: &Dataset, nuis: &NuisanceEstimates) -> Result<PseudoOutcomes> {
    check(data, nuis)?;
    let (pi, g, mu0, mu1, mu_a) = (nuis.pi(), nuis.g(), nuis.mu0(), nuis.mu1(), nuis.mu_a());
    let values = (0..data.n())
        .map(|i| match data.outcome()[i] {
            None => mu1[i] - mu0[i],
            Some(y) => {
                let (a, c) = (data.a(i), data.c(i));
                (a - pi[i]) * c / (pi[i] * (1.0 - pi[i]) * g[i]) * (y - mu_a[i]) + mu1[i] - mu0[i]
            }
        })
        .collect();
    Ok(PseudoOutcomes::all(PseudoKind::Mdr, values))
}

/// Inverse-probability weighted pseudo-outcome; censored rows contribute 0.
pub fn iptw_ipcw_pseudo(data: &Dataset, nuis: &NuisanceEstimates) -> Result<PseudoOutcomes> {
    check(data, nuis)?;
    let (pi, g) = (nuis.pi(), nuis.g());
    let values = (0..data.n())
        .map(|i| match data.outcome()[i] {
            None => 0.0,
            Some(y) => {
                let (a, c) = (data.a(i), data.c(i));
                c * a * y / (g[i] * pi[i]) - c * (1.0 - a) * y / (g[i] * (1.0 - pi[i]))
            }
        })
        .collect();
    Ok(PseudoOutcomes::all(PseudoKind::IptwIpcw, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn one_row(a: bool, c: bool, y: Option<f64>) -> Dataset {
        Dataset::new(Array2::zeros((1, 1)), vec![a], vec![c], vec![y], vec![0]).unwrap()
    }

    fn nuis(a: bool, pi: f64, g: f64, mu0: f64, mu1: f64) -> NuisanceEstimates {
        NuisanceEstimates::from_parts(&[a], vec![pi], vec![g], vec![mu0], vec![mu1], None, 0.0).unwrap()
    }

    #[test]
    fn dr_hand_values() {
        let d = one_row(true, true, Some(2.0));
        let v = dr_pseudo(&d, &nuis(true, 0.5, 1.0, 0.0, 1.0), None).unwrap().dense();
        assert_eq!(v, vec![3.0]);
        let d = one_row(false, true, Some(1.0));
        let v = dr_pseudo(&d, &nuis(false, 0.5, 1.0, 1.0, 2.0), None).unwrap().dense();
        assert_eq!(v, vec![1.0]);
    }

    #[test]
    fn dr_residual_zero_gives_contrast() {
        let d = one_row(true, true, Some(1.7));
        let v = dr_pseudo(&d, &nuis(true, 0.3, 1.0, 0.4, 1.7), None).unwrap().dense();
        assert!((v[0] - 1.3).abs() < 1e-15);
    }

    #[test]
    fn dr_available_case_skips_censored() {
        let d = one_row(true, false, None);
        let p = dr_pseudo(&d, &nuis(true, 0.5, 0.5, 0.0, 1.0), None).unwrap();
        assert_eq!(p.values, vec![None]);
        let p = dr_pseudo(&d, &nuis(true, 0.5, 0.5, 0.0, 1.0), Some(&[2.0])).unwrap();
        assert_eq!(p.dense(), vec![3.0]);
    }

    #[test]
    fn mdr_hand_values() {
        let d = one_row(true, true, Some(2.0));
        assert_eq!(mdr_pseudo(&d, &nuis(true, 0.5, 0.5, 0.0, 1.0)).unwrap().dense(), vec![5.0]);
        let d = one_row(true, false, None);
        assert_eq!(mdr_pseudo(&d, &nuis(true, 0.5, 0.5, 0.25, 1.0)).unwrap().dense(), vec![0.75]);
    }

    #[test]
    fn iptw_ipcw_hand_values() {
        let d = one_row(true, true, Some(2.0));
        assert_eq!(iptw_ipcw_pseudo(&d, &nuis(true, 0.5, 0.5, 0.0, 0.0)).unwrap().dense(), vec![8.0]);
        let d = one_row(true, false, None);
        assert_eq!(iptw_ipcw_pseudo(&d, &nuis(true, 0.5, 0.5, 0.0, 0.0)).unwrap().dense(), vec![0.0]);
        let d = one_row(false, true, Some(0.0));
        assert_eq!(iptw_ipcw_pseudo(&d, &nuis(false, 0.5, 0.5, 0.0, 0.0)).unwrap().dense(), vec![0.0]);
    }
}
