//! Smallest eigenpairs of sparse grid Laplacians.
//!
//! [`lobpcg_smallest`] is a block preconditioned conjugate-gradient solver
//! with soft locking: columns whose residual drops below tolerance stop
//! contributing search directions but remain in every Rayleigh–Ritz step, so
//! they keep being refined for free. The search space `[X, W, P]` is
//! orthonormalized explicitly (two passes of projection plus SVQB), which keeps
//! the projected eigenproblem standard rather than generalized and lets rank
//! deficiency show up as dropped columns instead of a failed Cholesky.
//!
//! [`dense_reference_eig`] is the full dense decomposition used as a test
//! oracle on small problems.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{FmapError, Result};
use crate::laplacian::SparseSymmetricMatrix;
use crate::par::Execution;

pub const DEFAULT_K: usize = 200;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 500;
const DENSE_LIMIT: usize = 4096;

/// Low-frequency eigenbasis of one image's Laplacian.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    /// Ascending eigenvalues `λ₁ ≤ … ≤ λ_k`.
    pub eigenvalues: Vec<f64>,
    /// `n × k`; column `j` is the eigenfunction of `eigenvalues[j]`.
    pub vectors: DMatrix<f64>,
    pub residual_norms: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub content_hash: String,
}

impl SpectralBasis {
    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn nodes(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn with_grid(mut self, height: usize, width: usize) -> Result<Self> {
        if height * width != self.nodes() {
            return Err(FmapError::Shape(format!(
                "grid {height}x{width} does not match a basis over {} nodes",
                self.nodes()
            )));
        }
        self.height = height;
        self.width = width;
        Ok(self)
    }

    pub fn with_hash(mut self, hash: impl Into<String>) -> Self {
        self.content_hash = hash.into();
        self
    }

    /// Keep only the first `k` eigenpairs.
    pub fn truncated(&self, k: usize) -> Self {
        let k = k.min(self.k());
        SpectralBasis {
            eigenvalues: self.eigenvalues[..k].to_vec(),
            vectors: self.vectors.columns(0, k).into_owned(),
            residual_norms: self.residual_norms[..k].to_vec(),
            ..self.clone()
        }
    }

    /// `‖ΦᵗΦ − I‖_F`.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.vectors.transpose() * &self.vectors;
        (gram - DMatrix::<f64>::identity(self.k(), self.k())).norm()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LobpcgOptions {
    pub k: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Jacobi (diagonal) preconditioning of the residuals.
    pub precondition: bool,
    pub execution: Execution,
}

impl Default for LobpcgOptions {
    fn default() -> Self {
        LobpcgOptions {
            k: DEFAULT_K,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            seed: 0,
            precondition: true,
            execution: Execution::default(),
        }
    }
}

impl LobpcgOptions {
    /// Basis size actually usable on a graph with `n` nodes.
    pub fn clamped_k(&self, n: usize) -> usize {
        self.k.min(n.saturating_sub(1)).max(1)
    }
}

/// SHA-256 over the bit patterns of the matrix triplets.
pub fn hash_matrix(l: &SparseSymmetricMatrix) -> String {
    let mut h = Sha256::new();
    h.update((l.n() as u64).to_le_bytes());
    for (r, c, v) in l.triplets() {
        h.update((r as u64).to_le_bytes());
        h.update((c as u64).to_le_bytes());
        h.update(v.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Flip each column so that its largest-magnitude entry is positive.
///
/// Entries within a relative `1e-9` of the column maximum count as tied and
/// the lowest index among them decides, which keeps the choice stable under
/// rounding differences between solvers.
pub fn canonicalize_signs(mut basis: SpectralBasis) -> SpectralBasis {
    canonicalize_columns(&mut basis.vectors);
    basis
}

pub(crate) fn canonicalize_columns(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let max = col.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if max == 0.0 {
            continue;
        }
        let pivot = col
            .iter()
            .copied()
            .find(|v| v.abs() >= max * (1.0 - 1e-9))
            .expect("maximum is attained");
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
}

fn sorted_eigh(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = eig.eigenvectors.select_columns(&order);
    (values, vectors)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

fn residual_norms(l: &SparseSymmetricMatrix, x: &DMatrix<f64>, lambda: &[f64], exec: Execution) -> Vec<f64> {
    let ax = l.mul_block_with(x, exec);
    (0..x.ncols())
        .map(|j| (ax.column(j) - x.column(j) * lambda[j]).norm())
        .collect()
}

/// Full dense eigendecomposition truncated to the `k` smallest pairs.
pub fn dense_reference_eig(l: &SparseSymmetricMatrix, k: usize) -> Result<SpectralBasis> {
    let n = l.n();
    if n > DENSE_LIMIT {
        return Err(FmapError::Argument(format!(
            "dense reference is limited to n <= {DENSE_LIMIT}, got {n}"
        )));
    }
    if k == 0 || k > n {
        return Err(FmapError::Argument(format!("need 0 < k <= n, got k = {k}, n = {n}")));
    }
    let (values, vectors) = sorted_eigh(l.to_dense());
    let mut vectors = vectors.columns(0, k).into_owned();
    canonicalize_columns(&mut vectors);
    let eigenvalues = values[..k].to_vec();
    let residual_norms = residual_norms(l, &vectors, &eigenvalues, Execution::Sequential);
    Ok(SpectralBasis {
        eigenvalues,
        vectors,
        residual_norms,
        height: n,
        width: 1,
        content_hash: hash_matrix(l),
    })
}

/// Remove the components of `s` along the orthonormal columns of `x`.
fn project_out(s: &mut DMatrix<f64>, x: &DMatrix<f64>) {
    if s.ncols() == 0 || x.ncols() == 0 {
        return;
    }
    let coeffs = x.transpose() * &*s;
    *s -= x * coeffs;
}

/// Orthonormal basis of the column span of `s` via eigendecomposition of the
/// scaled Gram matrix; directions with relative energy below `drop` vanish.
fn svqb(s: &DMatrix<f64>, drop: f64) -> DMatrix<f64> {
    let norms: Vec<f64> = s.column_iter().map(|c| c.norm()).collect();
    let max_norm = norms.iter().copied().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..s.ncols())
        .filter(|&j| norms[j] > max_norm * 1e-14 && norms[j] > 0.0)
        .collect();
    if keep.is_empty() {
        return DMatrix::zeros(s.nrows(), 0);
    }
    let mut scaled = s.select_columns(&keep);
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col /= norms[keep[j]];
    }
    let mut gram = scaled.transpose() * &scaled;
    symmetrize(&mut gram);
    let (theta, v) = sorted_eigh(gram);
    let top = theta.last().copied().unwrap_or(0.0);
    let cols: Vec<usize> = (0..theta.len()).filter(|&i| theta[i] > drop * top).collect();
    let mut out = scaled * v.select_columns(&cols);
    for (j, &i) in cols.iter().enumerate() {
        let inv = 1.0 / theta[i].sqrt();
        out.column_mut(j).scale_mut(inv);
    }
    out
}

fn orthonormal_complement(s: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = s.clone();
    project_out(&mut s, x);
    project_out(&mut s, x);
    let mut s = svqb(&s, 1e-12);
    project_out(&mut s, x);
    svqb(&s, 1e-10)
}

fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

/// `k` smallest eigenpairs of a symmetric positive semidefinite sparse matrix.
fn guard_columns(k: usize) -> usize {
    (k / 10).clamp(4, 32)
}

pub fn lobpcg_smallest(l: &SparseSymmetricMatrix, opts: &LobpcgOptions) -> Result<SpectralBasis> {
    let n = l.n();
    let k = opts.k;
    let exec = opts.execution;
    if k == 0 || k > n {
        return Err(FmapError::Argument(format!(
            "basis size must satisfy 0 < k <= n, got k = {k}, n = {n}"
        )));
    }
    if !(opts.tol > 0.0) {
        return Err(FmapError::Argument(format!("tolerance must be positive, got {}", opts.tol)));
    }

    // Extra guard columns speed up convergence of the last wanted pairs.
    let m = (k + guard_columns(k)).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut x0 = DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(&mut rng));
    x0.column_mut(0).fill(1.0 / (n as f64).sqrt());
    let mut x = svqb(&x0, 1e-12);
    if x.ncols() < m {
        return Err(FmapError::Numeric("initial block is rank deficient".into()));
    }

    let inv_diag: Option<Vec<f64>> = opts.precondition.then(|| {
        l.diagonal()
            .into_iter()
            .map(|d| if d > 0.0 { 1.0 / d } else { 1.0 })
            .collect()
    });

    // Initial Rayleigh–Ritz on X alone.
    let ax = l.mul_block_with(&x, exec);
    let mut h = x.transpose() * &ax;
    symmetrize(&mut h);
    let (mut lambda, v) = sorted_eigh(h);
    x = &x * v;

    let mut p: Option<DMatrix<f64>> = None;
    let mut residuals;
    let mut iterations = 0;
    loop {
        let ax = l.mul_block_with(&x, exec);
        let mut r = &ax - &x * DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&lambda));
        residuals = r.column_iter().map(|c| c.norm()).collect::<Vec<f64>>();
        let mut active: Vec<usize> = (0..k)
            .filter(|&j| residuals[j] > opts.tol * lambda[j].abs().max(1.0))
            .collect();
        if active.is_empty() || iterations >= opts.max_iter {
            break;
        }
        active.extend(k..m);
        iterations += 1;

        if let Some(d) = &inv_diag {
            for mut col in r.column_iter_mut() {
                for (v, s) in col.iter_mut().zip(d) {
                    *v *= s;
                }
            }
        }
        let w = r.select_columns(&active);
        let search = match &p {
            Some(p) => hstack(&w, &p.select_columns(&active)),
            None => w,
        };
        let s = orthonormal_complement(&search, &x);
        if s.ncols() == 0 {
            // X already spans an invariant subspace up to rounding.
            break;
        }

        let a_s = l.mul_block_with(&s, exec);
        let q = hstack(&x, &s);
        let aq = hstack(&ax, &a_s);
        let mut g = q.transpose() * aq;
        symmetrize(&mut g);
        let (theta, y) = sorted_eigh(g);
        let y = y.columns(0, m).into_owned();
        let y_s = y.rows(m, s.ncols()).into_owned();

        x = &q * &y;
        p = Some(&s * y_s);
        lambda = theta[..m].to_vec();

        // Rounding slowly erodes orthonormality of X; restore it occasionally.
        if iterations % 20 == 0 {
            let q = svqb(&x, 1e-14);
            if q.ncols() == m {
                let ax = l.mul_block_with(&q, exec);
                let mut h = q.transpose() * ax;
                symmetrize(&mut h);
                let (vals, v) = sorted_eigh(h);
                x = q * v;
                lambda = vals;
                p = None;
            }
        }
    }

    residuals.truncate(k);
    lambda.truncate(k);
    let converged = (0..k).all(|j| residuals[j] <= opts.tol * lambda[j].abs().max(1.0));
    if !converged {
        let max_residual = residuals.iter().copied().fold(0.0, f64::max);
        return Err(FmapError::Convergence {
            iterations,
            max_residual,
            residuals,
        });
    }

    let mut x = x.columns(0, k).into_owned();
    canonicalize_columns(&mut x);
    Ok(SpectralBasis {
        eigenvalues: lambda,
        vectors: x,
        residual_norms: residuals,
        height: n,
        width: 1,
        content_hash: hash_matrix(l),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::laplacian::{build_laplacian, GridEdge, WeightedGridGraph};
    use approx::assert_relative_eq;

    fn path2() -> SparseSymmetricMatrix {
        build_laplacian(&WeightedGridGraph {
            height: 1,
            width: 2,
            edges: vec![GridEdge { a: 0, b: 1, weight: 1.0 }],
        })
    }

    #[test]
    fn path_graph_eigenpairs() {
        let opts = LobpcgOptions {
            k: 2,
            tol: 1e-10,
            ..Default::default()
        };
        for basis in [lobpcg_smallest(&path2(), &opts).unwrap(), dense_reference_eig(&path2(), 2).unwrap()] {
            assert_relative_eq!(basis.eigenvalues[0], 0.0, epsilon = 1e-12);
            assert_relative_eq!(basis.eigenvalues[1], 2.0, epsilon = 1e-12);
            let s = 1.0 / 2f64.sqrt();
            assert_relative_eq!(basis.vectors[(0, 0)], s, epsilon = 1e-12);
            assert_relative_eq!(basis.vectors[(1, 0)], s, epsilon = 1e-12);
            assert_relative_eq!(basis.vectors[(0, 1)].abs(), s, epsilon = 1e-12);
            assert_relative_eq!(basis.vectors[(0, 1)], -basis.vectors[(1, 1)], epsilon = 1e-12);
        }
    }

    #[test]
    fn bad_arguments() {
        let l = path2();
        let opts = LobpcgOptions { k: 3, ..Default::default() };
        assert!(matches!(lobpcg_smallest(&l, &opts), Err(FmapError::Argument(_))));
        let opts = LobpcgOptions { k: 1, tol: 0.0, ..Default::default() };
        assert!(matches!(lobpcg_smallest(&l, &opts), Err(FmapError::Argument(_))));
        assert!(dense_reference_eig(&l, 0).is_err());
    }

    #[test]
    fn zero_operator_is_degenerate_but_orthonormal() {
        let l = SparseSymmetricMatrix::from_triplets(4, &[]).unwrap();
        let b = dense_reference_eig(&l, 4).unwrap();
        assert!(b.eigenvalues.iter().all(|&v| v == 0.0));
        assert!(b.orthonormality_error() < 1e-12);
    }

    #[test]
    fn uniform_grid_second_eigenvalue() {
        let l = build_laplacian(&WeightedGridGraph::uniform(8, 8));
        let dense = dense_reference_eig(&l, 5).unwrap();
        let expected = 2.0 - 2.0 * (std::f64::consts::PI / 8.0).cos();
        assert_relative_eq!(dense.eigenvalues[1], expected, epsilon = 1e-10);
        let opts = LobpcgOptions { k: 5, tol: 1e-9, ..Default::default() };
        let lob = lobpcg_smallest(&l, &opts).unwrap();
        assert_relative_eq!(lob.eigenvalues[1], expected, epsilon = 1e-10);
    }

    #[test]
    fn canonical_signs() {
        let mk = |v: &[f64]| SpectralBasis {
            eigenvalues: vec![0.0],
            vectors: DMatrix::from_column_slice(v.len(), 1, v),
            residual_norms: vec![0.0],
            height: v.len(),
            width: 1,
            content_hash: String::new(),
        };
        let b = canonicalize_signs(mk(&[-1.0, 0.5]));
        assert_eq!(b.vectors.as_slice(), &[1.0, -0.5]);
        assert_eq!(canonicalize_signs(b.clone()), b);
        let tie = canonicalize_signs(mk(&[0.5, -0.5]));
        assert_eq!(tie.vectors.as_slice(), &[0.5, -0.5]);
        let tie = canonicalize_signs(mk(&[-0.5, 0.5]));
        assert_eq!(tie.vectors.as_slice(), &[0.5, -0.5]);
    }

    #[test]
    fn nonconvergence_reports_residuals() {
        let l = build_laplacian(&WeightedGridGraph::uniform(10, 10));
        let opts = LobpcgOptions { k: 6, tol: 1e-12, max_iter: 1, ..Default::default() };
        match lobpcg_smallest(&l, &opts) {
            Err(FmapError::Convergence { residuals, iterations, .. }) => {
                assert_eq!(residuals.len(), 6);
                assert_eq!(iterations, 1);
            }
            other => panic!("expected convergence error, got {other:?}"),
        }
    }
}
