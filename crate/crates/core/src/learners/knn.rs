use ndarray::{Array2, ArrayView2};

/// Brute-force k-nearest-neighbour regression in Euclidean distance.
/// Ties in distance are broken by training-row order.
#[derive(Clone, Debug)]
pub struct Knn {
    train: Array2<f64>,
    targets: Vec<f64>,
    weights: Option<Vec<f64>>,
    k: usize,
}

impl Knn {
    pub fn fit(features: ArrayView2<'_, f64>, targets: &[f64], weights: Option<&[f64]>, k: usize) -> Self {
        Self {
            train: features.to_owned(),
            targets: targets.to_vec(),
            weights: weights.map(<[f64]>::to_vec),
            k: k.min(targets.len()),
        }
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        let n = self.train.nrows();
        let mut dist: Vec<(f64, usize)> = Vec::with_capacity(n);
        x.rows()
            .into_iter()
            .map(|row| {
                dist.clear();
                for (i, t) in self.train.rows().into_iter().enumerate() {
                    let d: f64 = t.iter().zip(row.iter()).map(|(a, b)| (a - b).powi(2)).sum();
                    dist.push((d, i));
                }
                let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
                if self.k < n {
                    dist.select_nth_unstable_by(self.k - 1, cmp);
                }
                let nearest = &dist[..self.k];
                match &self.weights {
                    None => nearest.iter().map(|&(_, i)| self.targets[i]).sum::<f64>() / self.k as f64,
                    Some(w) => {
                        let sw: f64 = nearest.iter().map(|&(_, i)| w[i]).sum();
                        if sw > 0.0 {
                            nearest.iter().map(|&(_, i)| w[i] * self.targets[i]).sum::<f64>() / sw
                        } else {
                            nearest.iter().map(|&(_, i)| self.targets[i]).sum::<f64>() / self.k as f64
                        }
                    }
                }
            })
            .collect()
    }
}
