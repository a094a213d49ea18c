use ndarray::ArrayView2;

/// Features quantised into at most 256 ordered bins per column.
///
/// Bin `b` of column `j` holds values in `(edges[b-1], edges[b]]`, so a
/// split "bin <= b" is the same as the raw-value rule `x <= edges[b]`.
#[derive(Clone, Debug)]
pub(crate) struct BinnedMatrix {
    n: usize,
    codes: Vec<u8>,
    edges: Vec<Vec<f64>>,
}

fn column_edges(values: &mut [f64], max_bins: usize) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let mut uniques: Vec<(f64, usize)> = Vec::new();
    for &v in values.iter() {
        match uniques.last_mut() {
            Some((u, c)) if *u == v => *c += 1,
            _ => uniques.push((v, 1)),
        }
    }
    let mid = |t: usize| 0.5 * (uniques[t].0 + uniques[t + 1].0);
    if uniques.len() <= max_bins {
        return (0..uniques.len().saturating_sub(1)).map(mid).collect();
    }
    let mut edges = Vec::with_capacity(max_bins - 1);
    let mut cum = 0usize;
    for t in 0..uniques.len() - 1 {
        cum += uniques[t].1;
        // Cut once the running count reaches the next equal-frequency target.
        let target = (edges.len() + 1) * n / max_bins;
        if cum >= target && edges.len() < max_bins - 1 {
            edges.push(mid(t));
        }
    }
    edges
}

impl BinnedMatrix {
    pub fn new(x: ArrayView2<'_, f64>, max_bins: usize) -> Self {
        let (n, p) = x.dim();
        let mut codes = vec![0u8; n * p];
        let mut edges = Vec::with_capacity(p);
        for j in 0..p {
            let mut col: Vec<f64> = x.column(j).to_vec();
            let e = column_edges(&mut col, max_bins.min(256));
            for i in 0..n {
                codes[j * n + i] = e.partition_point(|&edge| edge < x[[i, j]]) as u8;
            }
            edges.push(e);
        }
        Self { n, codes, edges }
    }

    pub fn n_features(&self) -> usize {
        self.edges.len()
    }

    pub fn n_bins(&self, j: usize) -> usize {
        self.edges[j].len() + 1
    }

    #[inline]
    pub fn column(&self, j: usize) -> &[u8] {
        &self.codes[j * self.n..(j + 1) * self.n]
    }

    pub fn threshold(&self, j: usize, bin: usize) -> f64 {
        self.edges[j][bin]
    }
}
