//! Feature-weighted 4-connected grid graphs and their combinatorial Laplacians.
//!
//! Nodes are numbered row-major (`y * w + x`) everywhere in the crate, so
//! eigenvectors, point maps and rendered images all agree on pixel order.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{FmapError, Result};
use crate::interchange::FeatureGrid;
use crate::par::{self, Execution};

/// How the bandwidth of the edge-weight kernel is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaMode {
    /// Median of all feature entries; median of magnitudes if that is not positive.
    #[default]
    Values,
    /// Median of the magnitudes of all feature entries.
    AbsValues,
    /// Median of the feature distances across grid edges.
    EdgeDists,
}

impl std::str::FromStr for SigmaMode {
    type Err = FmapError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "values" => Ok(SigmaMode::Values),
            "absvalues" => Ok(SigmaMode::AbsValues),
            "edgedists" => Ok(SigmaMode::EdgeDists),
            other => Err(FmapError::Argument(format!(
                "unknown sigma mode {other:?} (expected values, absvalues or edgedists)"
            ))),
        }
    }
}

impl std::fmt::Display for SigmaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SigmaMode::Values => "values",
            SigmaMode::AbsValues => "absvalues",
            SigmaMode::EdgeDists => "edgedists",
        })
    }
}

fn median(mut values: Vec<f64>) -> f64 {
    let n = values.len();
    debug_assert!(n > 0);
    let mid = n / 2;
    let (lower, m, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *m;
    if n % 2 == 1 {
        upper
    } else {
        let below = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (below + upper)
    }
}

/// Median of all feature entries, falling back to the median magnitude when
/// the literal median is not positive.
pub fn median_sigma(grid: &FeatureGrid) -> Result<f64> {
    let values: Vec<f64> = grid.data().iter().map(|&v| v as f64).collect();
    let literal = median(values.clone());
    if literal > 0.0 {
        return Ok(literal);
    }
    let abs = median(values.into_iter().map(f64::abs).collect());
    if abs > 0.0 {
        Ok(abs)
    } else {
        Err(FmapError::Degenerate(
            "median feature magnitude is zero; cannot derive an edge-weight bandwidth".into(),
        ))
    }
}

pub fn sigma_for(grid: &FeatureGrid, mode: SigmaMode) -> Result<f64> {
    match mode {
        SigmaMode::Values => median_sigma(grid),
        SigmaMode::AbsValues => {
            let m = median(grid.data().iter().map(|&v| (v as f64).abs()).collect());
            if m > 0.0 {
                Ok(m)
            } else {
                Err(FmapError::Degenerate("median feature magnitude is zero".into()))
            }
        }
        SigmaMode::EdgeDists => {
            let dists: Vec<f64> = grid_edges(grid.height(), grid.width())
                .map(|(a, b)| feature_distance(grid, a, b))
                .collect();
            let m = median(dists);
            if m > 0.0 {
                Ok(m)
            } else {
                Err(FmapError::Degenerate(
                    "median edge feature distance is zero".into(),
                ))
            }
        }
    }
}

/// Edge of a grid graph between row-major node indices `a < b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridEdge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGridGraph {
    pub height: usize,
    pub width: usize,
    /// For each node in row-major order: its right edge, then its down edge.
    pub edges: Vec<GridEdge>,
}

impl WeightedGridGraph {
    pub fn nodes(&self) -> usize {
        self.height * self.width
    }

    /// `(x, y)` grid coordinates of a node.
    pub fn coords(&self, node: usize) -> (usize, usize) {
        (node % self.width, node / self.width)
    }

    /// Unit weights everywhere.
    pub fn uniform(height: usize, width: usize) -> Self {
        WeightedGridGraph {
            height,
            width,
            edges: grid_edges(height, width)
                .map(|(a, b)| GridEdge { a, b, weight: 1.0 })
                .collect(),
        }
    }
}

fn grid_edges(h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..h * w).flat_map(move |i| {
        let (x, y) = (i % w, i / w);
        let right = (x + 1 < w).then_some((i, i + 1));
        let down = (y + 1 < h).then_some((i, i + w));
        right.into_iter().chain(down)
    })
}

fn feature_distance(grid: &FeatureGrid, a: usize, b: usize) -> f64 {
    let d = grid.dim();
    let fa = &grid.data()[a * d..(a + 1) * d];
    let fb = &grid.data()[b * d..(b + 1) * d];
    fa.iter()
        .zip(fb)
        .map(|(&p, &q)| {
            let diff = p as f64 - q as f64;
            diff * diff
        })
        .sum::<f64>()
        .sqrt()
}

pub fn edge_weights(grid: &FeatureGrid, sigma: f64) -> Result<WeightedGridGraph> {
    edge_weights_with(grid, sigma, Execution::default())
}

/// `w(x, y) = exp(-‖E_x − E_y‖₂ / σ)` on every 4-neighbour edge.
pub fn edge_weights_with(grid: &FeatureGrid, sigma: f64, exec: Execution) -> Result<WeightedGridGraph> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(FmapError::Argument(format!("sigma must be positive, got {sigma}")));
    }
    let (h, w) = (grid.height(), grid.width());
    let per_node = par::map_range(exec, h * w, |i| {
        let (x, y) = (i % w, i / w);
        let weight = |j: usize| {
            (-feature_distance(grid, i, j) / sigma)
                .exp()
                .max(f64::MIN_POSITIVE)
        };
        let right = (x + 1 < w).then(|| GridEdge {
            a: i,
            b: i + 1,
            weight: weight(i + 1),
        });
        let down = (y + 1 < h).then(|| GridEdge {
            a: i,
            b: i + w,
            weight: weight(i + w),
        });
        [right, down]
    });
    Ok(WeightedGridGraph {
        height: h,
        width: w,
        edges: per_node.into_iter().flatten().flatten().collect(),
    })
}

/// Symmetric sparse matrix in compressed-row layout with sorted column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymmetricMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSymmetricMatrix {
    /// Assemble from `(row, col, value)` triplets; duplicates are summed.
    /// Fails if the assembled pattern is not symmetric within `1e-12`.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(r, c, v) in triplets {
            if r >= n || c >= n {
                return Err(FmapError::Argument(format!(
                    "triplet ({r}, {c}) out of range for n = {n}"
                )));
            }
            rows[r].push((c, v));
        }
        let mut m = Self::from_rows(n, rows);
        m.prune_duplicates();
        if !m.is_symmetric(1e-12) {
            return Err(FmapError::Validation("triplets do not form a symmetric matrix".into()));
        }
        Ok(m)
    }

    fn from_rows(n: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            for (c, v) in row {
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        SparseSymmetricMatrix {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    fn prune_duplicates(&mut self) {
        let mut rows = Vec::with_capacity(self.n);
        for r in 0..self.n {
            let mut row: Vec<(usize, f64)> = Vec::new();
            for (c, v) in self.row(r) {
                match row.last_mut() {
                    Some(last) if last.0 == c => last.1 += v,
                    _ => row.push((c, v)),
                }
            }
            rows.push(row);
        }
        *self = Self::from_rows(self.n, rows);
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(col, value)` entries of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(j, _)| j == c).map_or(0.0, |(_, v)| v)
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.triplets().all(|(r, c, v)| (self.get(c, r) - v).abs() <= tol)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (r, c, v) in self.triplets() {
            m[(r, c)] += v;
        }
        m
    }

    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        for (r, out) in y.iter_mut().enumerate().take(self.n) {
            *out = self.row(r).map(|(c, v)| v * x[c]).sum();
        }
    }

    pub fn mul_block(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.mul_block_with(x, Execution::default())
    }

    /// `L · X` for an `n × m` block; columns are processed independently.
    pub fn mul_block_with(&self, x: &DMatrix<f64>, exec: Execution) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.n, "block row count must equal matrix order");
        let mut out = DMatrix::zeros(self.n, x.ncols());
        if self.n == 0 {
            return out;
        }
        par::for_each_chunk_mut(exec, out.as_mut_slice(), self.n, |j, col| {
            self.mul_vec(x.column(j).as_slice(), col);
        });
        out
    }
}

/// Unnormalized Laplacian `L = D − W` of a weighted grid graph.
pub fn build_laplacian(graph: &WeightedGridGraph) -> SparseSymmetricMatrix {
    let n = graph.nodes();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::with_capacity(5); n];
    let mut degree = vec![0.0; n];
    for e in &graph.edges {
        rows[e.a].push((e.b, -e.weight));
        rows[e.b].push((e.a, -e.weight));
        degree[e.a] += e.weight;
        degree[e.b] += e.weight;
    }
    for (i, row) in rows.iter_mut().enumerate() {
        row.push((i, degree[i]));
    }
    SparseSymmetricMatrix::from_rows(n, rows)
}

/// Laplacian of the feature-weighted grid of `grid`, returning the bandwidth used.
pub fn grid_laplacian(grid: &FeatureGrid, mode: SigmaMode) -> Result<(SparseSymmetricMatrix, f64)> {
    let sigma = sigma_for(grid, mode)?;
    let graph = edge_weights(grid, sigma)?;
    Ok((build_laplacian(&graph), sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid_of(values: &[f32], h: usize, w: usize, d: usize) -> FeatureGrid {
        FeatureGrid::new(h, w, d, values.to_vec()).unwrap()
    }

    #[test]
    fn sigma_medians() {
        // Grids need h, w >= 2, so pad the listed entries into multi-channel grids.
        let odd = grid_of(&[1.0, 2.0, 3.0, 4.0, 5.0, 3.0, 3.0, 3.0], 2, 2, 2);
        assert_eq!(median(vec![1.0, 2.0, 3.0, 4.0, 5.0]), 3.0);
        assert_eq!(median_sigma(&odd).unwrap(), 3.0);
        assert_eq!(median(vec![4.0, 1.0, 3.0, 2.0]), 2.5);
        let even = grid_of(&[1.0, 2.0, 3.0, 4.0], 2, 2, 1);
        assert_eq!(median_sigma(&even).unwrap(), 2.5);
    }

    #[test]
    fn sigma_fallback_to_magnitudes() {
        assert_eq!(median(vec![-5.0, -1.0, 0.0, 2.0, 3.0]), 0.0);
        // Five entries {-5,-1,0,2,3} plus three zeros keeps the literal median at 0;
        // magnitudes {0,0,0,0,1,2,3,5} have median 0.5.
        let g = grid_of(&[-5.0, -1.0, 0.0, 2.0, 3.0, 0.0, 0.0, 0.0], 2, 2, 2);
        assert_eq!(median_sigma(&g).unwrap(), 0.5);
        // The listed example: magnitudes {5,1,0,2,3} -> 2.
        assert_eq!(median(vec![5.0, 1.0, 0.0, 2.0, 3.0]), 2.0);
        let g = grid_of(&[-5.0, -1.0, 0.0, 2.0, 3.0, -2.0, 2.0, -2.0, 0.0], 3, 3, 1);
        assert_eq!(median_sigma(&g).unwrap(), 2.0);
    }

    #[test]
    fn all_zero_grid_is_degenerate() {
        let g = grid_of(&[0.0; 4], 2, 2, 1);
        assert!(matches!(median_sigma(&g), Err(FmapError::Degenerate(_))));
        assert!(matches!(sigma_for(&g, SigmaMode::EdgeDists), Err(FmapError::Degenerate(_))));
    }

    #[test]
    fn edge_weight_formula() {
        let g = grid_of(&[0.0, 1.0, 0.0, 1.0], 2, 2, 1);
        let graph = edge_weights(&g, 1.0).unwrap();
        assert_eq!(graph.edges.len(), 4);
        for e in &graph.edges {
            let horizontal = e.b == e.a + 1;
            let expected = if horizontal { (-1.0f64).exp() } else { 1.0 };
            assert_relative_eq!(e.weight, expected, epsilon = 1e-15);
        }
        let same = grid_of(&[0.5; 8], 2, 2, 2);
        assert!(edge_weights(&same, 0.3).unwrap().edges.iter().all(|e| e.weight == 1.0));
        assert!(edge_weights(&same, 0.0).is_err());
    }

    #[test]
    fn edge_count_matches_grid() {
        for (h, w) in [(2, 2), (3, 7), (5, 4)] {
            let graph = WeightedGridGraph::uniform(h, w);
            assert_eq!(graph.edges.len(), h * (w - 1) + w * (h - 1));
        }
    }

    #[test]
    fn path_laplacian() {
        let graph = WeightedGridGraph {
            height: 1,
            width: 2,
            edges: vec![GridEdge { a: 0, b: 1, weight: 1.0 }],
        };
        let l = build_laplacian(&graph).to_dense();
        assert_eq!(l, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
    }

    #[test]
    fn two_by_two_assembly() {
        let g = grid_of(&[0.0, 1.0, 0.0, 1.0], 2, 2, 1);
        let l = build_laplacian(&edge_weights(&g, 1.0).unwrap());
        let e = (-1.0f64).exp();
        for d in l.diagonal() {
            assert_relative_eq!(d, 1.0 + e, epsilon = 1e-15);
        }
        assert_relative_eq!(l.get(0, 1), -e);
        assert_relative_eq!(l.get(0, 2), -1.0);
        assert_eq!(l.get(0, 3), 0.0);
        let mut y = vec![0.0; 4];
        l.mul_vec(&[1.0; 4], &mut y);
        assert!(y.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn triplet_assembly_sums_duplicates() {
        let m = SparseSymmetricMatrix::from_triplets(
            2,
            &[(0, 0, 1.0), (0, 0, 1.0), (0, 1, -2.0), (1, 0, -2.0), (1, 1, 2.0)],
        )
        .unwrap();
        assert_eq!(m.to_dense(), DMatrix::from_row_slice(2, 2, &[2.0, -2.0, -2.0, 2.0]));
        assert!(SparseSymmetricMatrix::from_triplets(2, &[(0, 1, 1.0)]).is_err());
    }

    #[test]
    fn block_product_matches_dense() {
        let g = FeatureGrid::from_fn(4, 5, 3, |y, x, c| ((y * 13 + x * 7 + c * 3) % 5) as f32).unwrap();
        let (l, _) = grid_laplacian(&g, SigmaMode::Values).unwrap();
        let x = DMatrix::from_fn(20, 3, |i, j| ((i * 31 + j * 17) % 11) as f64 - 5.0);
        let dense = l.to_dense() * &x;
        for exec in [Execution::Sequential, Execution::Parallel] {
            let sparse = l.mul_block_with(&x, exec);
            assert!((sparse - &dense).abs().max() < 1e-12);
        }
    }
}
