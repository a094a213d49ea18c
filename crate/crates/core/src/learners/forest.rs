use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::binning::BinnedMatrix;
use super::ForestParams;
use crate::seed;

const LEAF: u32 = u32::MAX;

#[derive(Clone, Copy, Debug)]
struct Node {
    feature: u32,
    /// Split threshold for internal nodes, prediction for leaves.
    value: f64,
    left: u32,
    right: u32,
}

#[derive(Clone, Debug)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict_row(&self, row: &[f64]) -> f64 {
        let mut node = &self.nodes[0];
        while node.feature != LEAF {
            node = if row[node.feature as usize] <= node.value {
                &self.nodes[node.left as usize]
            } else {
                &self.nodes[node.right as usize]
            };
        }
        node.value
    }
}

/// Bootstrap-aggregated regression trees with per-split feature
/// subsampling. Split search runs on histogram-binned features.
#[derive(Clone, Debug)]
pub struct Forest {
    trees: Vec<Tree>,
}

struct Histogram {
    w: Vec<f64>,
    wy: Vec<f64>,
    count: Vec<u32>,
}

struct GrowContext<'a> {
    binned: &'a BinnedMatrix,
    targets: &'a [f64],
    /// Bootstrap multiplicity times observation weight.
    weight: Vec<f64>,
    count: Vec<u32>,
    mtry: usize,
    min_node_size: usize,
}

impl GrowContext<'_> {
    fn best_split(
        &self,
        rows: &[u32],
        features: &mut [usize],
        rng: &mut seed::Rng,
        hist: &mut Histogram,
    ) -> Option<(usize, usize)> {
        let (mut sw, mut swy) = (0.0, 0.0);
        let mut cnt = 0u32;
        for &r in rows {
            let r = r as usize;
            sw += self.weight[r];
            swy += self.weight[r] * self.targets[r];
            cnt += self.count[r];
        }
        if cnt as usize <= self.min_node_size || sw <= 0.0 {
            return None;
        }
        let parent = swy * swy / sw;
        let mut best: Option<(usize, usize)> = None;
        let mut best_score = parent + 1e-12 * parent.abs().max(1e-300);
        let (chosen, _) = features.partial_shuffle(rng, self.mtry);
        for &f in chosen.iter() {
            let nb = self.binned.n_bins(f);
            if nb < 2 {
                continue;
            }
            hist.w[..nb].fill(0.0);
            hist.wy[..nb].fill(0.0);
            hist.count[..nb].fill(0);
            let codes = self.binned.column(f);
            for &r in rows {
                let r = r as usize;
                let b = codes[r] as usize;
                hist.w[b] += self.weight[r];
                hist.wy[b] += self.weight[r] * self.targets[r];
                hist.count[b] += self.count[r];
            }
            let (mut lw, mut lwy) = (0.0, 0.0);
            let mut lc = 0u32;
            for b in 0..nb - 1 {
                lw += hist.w[b];
                lwy += hist.wy[b];
                lc += hist.count[b];
                if lc == 0 {
                    continue;
                }
                if lc == cnt {
                    break;
                }
                let rw = sw - lw;
                if lw <= 0.0 || rw <= 0.0 {
                    continue;
                }
                let rwy = swy - lwy;
                let score = lwy * lwy / lw + rwy * rwy / rw;
                if score > best_score {
                    best_score = score;
                    best = Some((f, b));
                }
            }
        }
        best
    }

    fn leaf_value(&self, rows: &[u32]) -> f64 {
        let (mut sw, mut swy) = (0.0, 0.0);
        for &r in rows {
            let r = r as usize;
            sw += self.weight[r];
            swy += self.weight[r] * self.targets[r];
        }
        if sw > 0.0 {
            swy / sw
        } else {
            0.0
        }
    }

    fn grow(&self, rows: &mut [u32], rng: &mut seed::Rng) -> Tree {
        let p = self.binned.n_features();
        let mut features: Vec<usize> = (0..p).collect();
        let mut hist = Histogram {
            w: vec![0.0; 256],
            wy: vec![0.0; 256],
            count: vec![0; 256],
        };
        let mut nodes = vec![Node {
            feature: LEAF,
            value: 0.0,
            left: 0,
            right: 0,
        }];
        let mut stack = vec![(0usize, 0usize, rows.len())];
        while let Some((id, start, end)) = stack.pop() {
            let slice = &mut rows[start..end];
            match self.best_split(slice, &mut features, rng, &mut hist) {
                None => {
                    nodes[id].value = self.leaf_value(slice);
                }
                Some((f, b)) => {
                    let codes = self.binned.column(f);
                    let mut mid = 0;
                    for k in 0..slice.len() {
                        if (codes[slice[k] as usize] as usize) <= b {
                            slice.swap(k, mid);
                            mid += 1;
                        }
                    }
                    let left = nodes.len();
                    let blank = Node {
                        feature: LEAF,
                        value: 0.0,
                        left: 0,
                        right: 0,
                    };
                    nodes.push(blank);
                    nodes.push(blank);
                    nodes[id] = Node {
                        feature: f as u32,
                        value: self.binned.threshold(f, b),
                        left: left as u32,
                        right: left as u32 + 1,
                    };
                    stack.push((left + 1, start + mid, end));
                    stack.push((left, start, start + mid));
                }
            }
        }
        Tree { nodes }
    }
}

impl Forest {
    pub fn fit(
        features: ArrayView2<'_, f64>,
        targets: &[f64],
        weights: Option<&[f64]>,
        params: &ForestParams,
        seed: u64,
    ) -> Self {
        let (n, p) = features.dim();
        let binned = BinnedMatrix::new(features, params.bins);
        let mtry = params
            .mtry
            .unwrap_or_else(|| ((p as f64).sqrt().floor() as usize).max(1))
            .min(p);
        let trees = (0..params.trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = seed::rng(seed::derive(seed, &[t as u64]));
                let mut count = vec![0u32; n];
                for _ in 0..n {
                    count[rng.random_range(0..n)] += 1;
                }
                let weight: Vec<f64> = (0..n)
                    .map(|i| f64::from(count[i]) * weights.map_or(1.0, |w| w[i]))
                    .collect();
                let mut rows: Vec<u32> = (0..n as u32).filter(|&i| count[i as usize] > 0).collect();
                let ctx = GrowContext {
                    binned: &binned,
                    targets,
                    weight,
                    count,
                    mtry,
                    min_node_size: params.min_node_size,
                };
                ctx.grow(&mut rows, &mut rng)
            })
            .collect();
        Self { trees }
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        let inv = 1.0 / self.trees.len() as f64;
        let mut buf = Vec::with_capacity(x.ncols());
        x.rows()
            .into_iter()
            .map(|row| {
                buf.clear();
                buf.extend(row.iter().copied());
                self.trees.iter().map(|t| t.predict_row(&buf)).sum::<f64>() * inv
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    fn step_data(n: usize) -> (Array2<f64>, Vec<f64>) {
        let mut rng = seed::rng(3);
        let mut x = Array2::zeros((n, 2));
        let mut y = vec![0.0; n];
        for i in 0..n {
            x[[i, 0]] = rng.random_range(-1.0..1.0);
            x[[i, 1]] = rng.random_range(-1.0..1.0);
            y[i] = if x[[i, 0]] > 0.2 { 2.0 } else { -1.0 };
        }
        (x, y)
    }

    #[test]
    fn learns_a_step_function() {
        let (x, y) = step_data(600);
        let params = ForestParams {
            trees: 50,
            ..ForestParams::default()
        };
        let f = Forest::fit(x.view(), &y, None, &params, 11);
        let probe = Array2::from_shape_vec((2, 2), vec![-0.8, 0.0, 0.8, 0.0]).unwrap();
        let p = f.predict(probe.view());
        assert!((p[0] + 1.0).abs() < 0.3, "{p:?}");
        assert!((p[1] - 2.0).abs() < 0.3, "{p:?}");
    }

    #[test]
    fn identical_seed_gives_identical_predictions() {
        let (x, y) = step_data(200);
        let params = ForestParams {
            trees: 20,
            ..ForestParams::default()
        };
        let a = Forest::fit(x.view(), &y, None, &params, 5).predict(x.view());
        let b = Forest::fit(x.view(), &y, None, &params, 5).predict(x.view());
        assert_eq!(a, b);
        let c = Forest::fit(x.view(), &y, None, &params, 6).predict(x.view());
        assert_ne!(a, c);
    }

    #[test]
    fn constant_targets_give_constant_forest() {
        let (x, _) = step_data(100);
        let y = vec![3.0; 100];
        let f = Forest::fit(x.view(), &y, None, &ForestParams::default(), 1);
        assert!(f.predict(x.view()).iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }
}
