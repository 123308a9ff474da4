//! Reverse-mode differentiation over a fixed set of matrix primitives, and
//! the Adam update used for per-pair optimization.
//!
//! A [`Tape`] records every value as an `f64` matrix (scalars are `1 × 1`).
//! Nodes only reference earlier nodes, so the tape order is a topological
//! order and [`Tape::backward`] is a single reverse sweep.

use nalgebra::DMatrix;

use crate::error::{FmapError, Result};
use crate::par::{self, Execution};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Hadamard(Var, Var),
    /// `x + 𝟙 b` with `b` a `1 × d` row.
    AddRow(Var, Var),
    /// `x ∘ (𝟙 g)` with `g` a `1 × d` row.
    MulRow(Var, Var),
    ConcatCols(Var, Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Relu(Var),
    RowSoftmax(Var),
    /// Per-row standardization; keeps `1 / sqrt(var + eps)` per row.
    InstanceNorm(Var, Vec<f64>),
    Exp(Var),
    SqFrobenius(Var),
    Frobenius(Var),
    Trace(Var),
    RowNorm(Var),
    /// `softmax(scale · q kᵗ) v`, evaluated in row blocks.
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: f64,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: DMatrix<f64>,
    op: Op,
}

/// Row block size for fused attention; bounds the live score matrix to
/// `ATTENTION_BLOCK × n_keys` entries.
pub const ATTENTION_BLOCK: usize = 64;

/// Record of a computation for reverse-mode differentiation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    execution: Execution,
}

/// Gradients of a scalar sink with respect to every node of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<DMatrix<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros if `v` does not reach the sink.
    pub fn wrt(&self, v: Var) -> DMatrix<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                DMatrix::zeros(r, c)
            }
        }
    }

    pub fn get(&self, v: Var) -> Option<&DMatrix<f64>> {
        self.grads[v.0].as_ref()
    }
}

fn softmax_rows(z: &mut DMatrix<f64>) {
    for i in 0..z.nrows() {
        let mut row = z.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row /= sum;
    }
}

fn row_broadcast(row: &DMatrix<f64>, nrows: usize) -> DMatrix<f64> {
    DMatrix::from_fn(nrows, row.ncols(), |_, j| row[(0, j)])
}

fn column_sums(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(1, m.ncols(), |_, j| m.column(j).sum())
}

/// Attention probabilities for query rows `[start, start + len)`.
fn attention_probs(q: &DMatrix<f64>, k: &DMatrix<f64>, scale: f64, start: usize, len: usize) -> DMatrix<f64> {
    let mut z = q.rows(start, len) * k.transpose();
    z *= scale;
    softmax_rows(&mut z);
    z
}

/// Dense single-head attention `softmax(scale · q kᵗ) v`, computed in row
/// blocks so that at most `block × n_keys` scores are alive at a time.
pub fn attention_forward(
    q: &DMatrix<f64>,
    k: &DMatrix<f64>,
    v: &DMatrix<f64>,
    scale: f64,
    exec: Execution,
) -> DMatrix<f64> {
    assert_eq!(q.ncols(), k.ncols(), "query/key widths differ");
    assert_eq!(k.nrows(), v.nrows(), "key/value counts differ");
    let n = q.nrows();
    let blocks: Vec<DMatrix<f64>> = par::map_range(exec, n.div_ceil(ATTENTION_BLOCK), |b| {
        let start = b * ATTENTION_BLOCK;
        let len = ATTENTION_BLOCK.min(n - start);
        attention_probs(q, k, scale, start, len) * v
    });
    let mut out = DMatrix::zeros(n, v.ncols());
    for (b, block) in blocks.into_iter().enumerate() {
        out.rows_mut(b * ATTENTION_BLOCK, block.nrows()).copy_from(&block);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_execution(execution: Execution) -> Self {
        Tape {
            nodes: Vec::new(),
            execution,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "node is not a scalar");
        m[(0, 0)]
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).1, self.shape(b).0, "matmul: inner dimensions differ");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shapes differ");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shapes differ");
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        self.push(value, Op::Scale(a, s))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "hadamard: shapes differ");
        let value = self.value(a).component_mul(self.value(b));
        self.push(value, Op::Hadamard(a, b))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (n, d) = self.shape(x);
        assert_eq!(self.shape(row), (1, d), "add_row: bias must be 1 x {d}");
        let value = self.value(x) + row_broadcast(self.value(row), n);
        self.push(value, Op::AddRow(x, row))
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (n, d) = self.shape(x);
        assert_eq!(self.shape(row), (1, d), "mul_row: gain must be 1 x {d}");
        let value = self.value(x).component_mul(&row_broadcast(self.value(row), n));
        self.push(value, Op::MulRow(x, row))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (na, ca) = self.shape(a);
        let (nb, cb) = self.shape(b);
        assert_eq!(na, nb, "concat_cols: row counts differ");
        let mut value = DMatrix::zeros(na, ca + cb);
        value.columns_mut(0, ca).copy_from(self.value(a));
        value.columns_mut(ca, cb).copy_from(self.value(b));
        self.push(value, Op::ConcatCols(a, b))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= self.shape(a).0, "slice_rows out of range");
        let value = self.value(a).rows(start, len).into_owned();
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= self.shape(a).1, "slice_cols out of range");
        let value = self.value(a).columns(start, len).into_owned();
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        softmax_rows(&mut value);
        self.push(value, Op::RowSoftmax(a))
    }

    /// Standardize each row to zero mean and unit variance (population
    /// variance, `eps` added before the square root).
    pub fn instance_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let d = x.ncols() as f64;
        let mut value = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for i in 0..x.nrows() {
            let mut row = value.row_mut(i);
            let mean = row.sum() / d;
            row.add_scalar_mut(-mean);
            let var = row.norm_squared() / d;
            let s = 1.0 / (var + eps).sqrt();
            row *= s;
            inv_std.push(s);
        }
        self.push(value, Op::InstanceNorm(a, inv_std))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn sq_frobenius(&mut self, a: Var) -> Var {
        let value = DMatrix::from_element(1, 1, self.value(a).norm_squared());
        self.push(value, Op::SqFrobenius(a))
    }

    pub fn frobenius(&mut self, a: Var) -> Var {
        let value = DMatrix::from_element(1, 1, self.value(a).norm());
        self.push(value, Op::Frobenius(a))
    }

    pub fn trace(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(r, c, "trace of a non-square matrix");
        let value = DMatrix::from_element(1, 1, self.value(a).trace());
        self.push(value, Op::Trace(a))
    }

    /// Euclidean norm of every row, as an `n × 1` column.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = DMatrix::from_fn(x.nrows(), 1, |i, _| x.row(i).norm());
        self.push(value, Op::RowNorm(a))
    }

    /// Fused `softmax(scale · q kᵗ) v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Var {
        let value = attention_forward(self.value(q), self.value(k), self.value(v), scale, self.execution);
        self.push(value, Op::Attention { q, k, v, scale })
    }

    /// Gradients of the scalar `sink` with respect to every node.
    pub fn backward(&self, sink: Var) -> Result<Gradients> {
        if self.shape(sink) != (1, 1) {
            return Err(FmapError::Argument(format!(
                "backward needs a scalar sink, node has shape {:?}",
                self.shape(sink)
            )));
        }
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; self.nodes.len()];
        grads[sink.0] = Some(DMatrix::from_element(1, 1, 1.0));

        fn acc(grads: &mut [Option<DMatrix<f64>>], v: Var, g: DMatrix<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=sink.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, &g * self.value(*b).transpose());
                    acc(&mut grads, *b, self.value(*a).transpose() * &g);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -&g);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, &g * *s),
                Op::Hadamard(a, b) => {
                    acc(&mut grads, *a, g.component_mul(self.value(*b)));
                    acc(&mut grads, *b, g.component_mul(self.value(*a)));
                }
                Op::AddRow(x, row) => {
                    acc(&mut grads, *row, column_sums(&g));
                    acc(&mut grads, *x, g.clone());
                }
                Op::MulRow(x, row) => {
                    let n = g.nrows();
                    acc(&mut grads, *row, column_sums(&g.component_mul(self.value(*x))));
                    acc(&mut grads, *x, g.component_mul(&row_broadcast(self.value(*row), n)));
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.shape(*a).1;
                    let cb = self.shape(*b).1;
                    acc(&mut grads, *a, g.columns(0, ca).into_owned());
                    acc(&mut grads, *b, g.columns(ca, cb).into_owned());
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut full = DMatrix::zeros(r, c);
                    full.rows_mut(*start, g.nrows()).copy_from(&g);
                    acc(&mut grads, *a, full);
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut full = DMatrix::zeros(r, c);
                    full.columns_mut(*start, g.ncols()).copy_from(&g);
                    acc(&mut grads, *a, full);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { 0.0 }));
                }
                Op::RowSoftmax(a) => {
                    let s = &node.value;
                    let mut ga = g.component_mul(s);
                    for i in 0..s.nrows() {
                        let dot = ga.row(i).sum();
                        for j in 0..s.ncols() {
                            ga[(i, j)] -= dot * s[(i, j)];
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::InstanceNorm(a, inv_std) => {
                    let y = &node.value;
                    let d = y.ncols() as f64;
                    let mut ga = DMatrix::zeros(y.nrows(), y.ncols());
                    for i in 0..y.nrows() {
                        let mean_g = g.row(i).sum() / d;
                        let mean_gy = g.row(i).dot(&y.row(i)) / d;
                        for j in 0..y.ncols() {
                            ga[(i, j)] = inv_std[i] * (g[(i, j)] - mean_g - mean_gy * y[(i, j)]);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, *a, g.component_mul(&node.value)),
                Op::SqFrobenius(a) => {
                    let s = g[(0, 0)];
                    acc(&mut grads, *a, self.value(*a) * (2.0 * s));
                }
                Op::Frobenius(a) => {
                    let norm = node.value[(0, 0)];
                    let x = self.value(*a);
                    if norm > 0.0 {
                        acc(&mut grads, *a, x * (g[(0, 0)] / norm));
                    } else {
                        acc(&mut grads, *a, DMatrix::zeros(x.nrows(), x.ncols()));
                    }
                }
                Op::Trace(a) => {
                    let n = self.shape(*a).0;
                    acc(&mut grads, *a, DMatrix::identity(n, n) * g[(0, 0)]);
                }
                Op::RowNorm(a) => {
                    let x = self.value(*a);
                    let norms = &node.value;
                    let ga = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
                        if norms[(i, 0)] > 0.0 {
                            g[(i, 0)] * x[(i, j)] / norms[(i, 0)]
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Attention { q, k, v, scale } => {
                    let (gq, gk, gv) = self.attention_backward(*q, *k, *v, *scale, &g);
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gv);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        scale: f64,
        g: &DMatrix<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let n = qm.nrows();
        // Per-block partials are summed in block order, so the result does not
        // depend on the execution policy.
        let parts = par::map_range(self.execution, n.div_ceil(ATTENTION_BLOCK), |b| {
            let start = b * ATTENTION_BLOCK;
            let len = ATTENTION_BLOCK.min(n - start);
            let s = attention_probs(qm, km, scale, start, len);
            let g_b = g.rows(start, len);
            let gv = s.transpose() * g_b;
            let ds = g_b * vm.transpose();
            let mut dz = ds.component_mul(&s);
            for i in 0..len {
                let dot = dz.row(i).sum();
                for j in 0..s.ncols() {
                    dz[(i, j)] -= dot * s[(i, j)];
                }
            }
            dz *= scale;
            let gq = &dz * km;
            let gk = dz.transpose() * qm.rows(start, len);
            (gq, gk, gv)
        });
        let mut gq = DMatrix::zeros(n, qm.ncols());
        let mut gk = DMatrix::zeros(km.nrows(), km.ncols());
        let mut gv = DMatrix::zeros(vm.nrows(), vm.ncols());
        for (b, (pq, pk, pv)) in parts.into_iter().enumerate() {
            gq.rows_mut(b * ATTENTION_BLOCK, pq.nrows()).copy_from(&pq);
            gk += pk;
            gv += pv;
        }
        (gq, gk, gv)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected first/second moment estimates for a list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<DMatrix<f64>>,
    second: Vec<DMatrix<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[DMatrix<f64>]) -> Self {
        AdamState {
            config,
            first: params.iter().map(|p| DMatrix::zeros(p.nrows(), p.ncols())).collect(),
            second: params.iter().map(|p| DMatrix::zeros(p.nrows(), p.ncols())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [DMatrix<f64>], grads: &[DMatrix<f64>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(FmapError::Shape(format!(
                "adam state tracks {} parameters, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.first[i].shape() || g.shape() != p.shape() {
                return Err(FmapError::Shape(format!(
                    "parameter {i}: expected shape {:?}, got parameter {:?} and gradient {:?}",
                    self.first[i].shape(),
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for idx in 0..p.len() {
                let gi = g[idx];
                m[idx] = beta1 * m[idx] + (1.0 - beta1) * gi;
                v[idx] = beta2 * v[idx] + (1.0 - beta2) * gi * gi;
                let m_hat = m[idx] / c1;
                let v_hat = v[idx] / c2;
                p[idx] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Compare reverse-mode gradients of `build` against central differences in
/// every parameter entry; returns the largest relative error
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn grad_check<F>(build: F, params: &[DMatrix<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::with_execution(Execution::Sequential);
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let sink = build(&mut tape, &vars);
    let grads = tape.backward(sink)?;

    let eval = |ps: &[DMatrix<f64>]| {
        let mut t = Tape::with_execution(Execution::Sequential);
        let vs: Vec<Var> = ps.iter().map(|p| t.leaf(p.clone())).collect();
        let s = build(&mut t, &vs);
        t.scalar(s)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<DMatrix<f64>> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for idx in 0..params[pi].len() {
            let orig = work[pi][idx];
            work[pi][idx] = orig + eps;
            let plus = eval(&work);
            work[pi][idx] = orig - eps;
            let minus = eval(&work);
            work[pi][idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn mat(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        // Small deterministic pseudo-random entries bounded away from zero.
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        DMatrix::from_fn(r, c, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let u = ((s >> 11) as f64) / ((1u64 << 53) as f64);
            let v = 2.0 * u - 1.0;
            if v.abs() < 0.05 {
                v + 0.1f64.copysign(v)
            } else {
                v
            }
        })
    }

    #[test]
    fn trace_gradient_is_identity() {
        let mut t = Tape::new();
        let x = t.leaf(mat(3, 3, 1));
        let s = t.trace(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x), DMatrix::identity(3, 3));
    }

    #[test]
    fn squared_norm_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(DMatrix::from_row_slice(1, 2, &[1.0, 2.0]));
        let s = t.sq_frobenius(x);
        assert_eq!(t.backward(s).unwrap().wrt(x).as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_sink_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(mat(2, 2, 3));
        assert!(matches!(t.backward(x), Err(FmapError::Argument(_))));
    }

    #[test]
    fn unreachable_leaf_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(mat(2, 2, 3));
        let y = t.leaf(mat(2, 3, 4));
        let s = t.sq_frobenius(x);
        let g = t.backward(s).unwrap();
        assert!(g.get(y).is_none());
        assert_eq!(g.wrt(y), DMatrix::zeros(2, 3));
    }

    /// Exercises every primitive; relu inputs are kept away from the kink.
    fn composite(t: &mut Tape, p: &[Var]) -> Var {
        let (a, b, c, bias, gain, w, q, k, v, z) = (p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], p[8], p[9]);
        let ab = t.matmul(a, b); // 4x3
        let abt = t.transpose(ab); // 3x4
        let cc = t.add(c, abt); // 3x4
        let ct = t.transpose(cc); // 4x3
        let biased = t.add_row(ct, bias);
        let gained = t.mul_row(biased, gain);
        let normed = t.instance_norm(gained, 1e-5);
        let cat = t.concat_cols(normed, ab); // 4x6
        let proj = t.matmul(cat, w); // 4x3
        let r = t.relu(proj);
        let sm = t.row_softmax(proj);
        let had = t.hadamard(r, sm);
        let top = t.slice_rows(had, 1, 2);
        let left = t.slice_cols(ab, 0, 2);
        let ex = t.exp(left); // 4x2
        let att = t.attention(q, k, v, 0.7); // 4x2
        let diff = t.sub(ex, att);
        let rn = t.row_norm(diff);
        let sq = t.sq_frobenius(rn);
        let fro = t.frobenius(top);
        let zz = t.matmul(z, z);
        let tr = t.trace(zz);
        let s1 = t.scale(fro, 3.0);
        let s2 = t.add(sq, s1);
        t.add(s2, tr)
    }

    fn composite_params() -> Vec<DMatrix<f64>> {
        vec![
            mat(4, 2, 1),
            mat(2, 3, 2),
            mat(3, 4, 3),
            mat(1, 3, 4),
            mat(1, 3, 5),
            mat(6, 3, 6),
            mat(4, 5, 7),
            mat(6, 5, 8),
            mat(6, 2, 9),
            mat(3, 3, 10),
        ]
    }

    #[test]
    fn composite_matches_finite_differences() {
        let params = composite_params();
        let err = grad_check(composite, &params, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn backward_is_linear_in_sink() {
        let params = composite_params();
        let mut t = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| t.leaf(p.clone())).collect();
        let f = composite(&mut t, &vars);
        let gz = t.trace(vars[9]);
        let fa = t.scale(f, 2.5);
        let gb = t.scale(gz, -1.5);
        let combo = t.add(fa, gb);
        let g_combo = t.backward(combo).unwrap();
        let g_f = t.backward(f).unwrap();
        let g_g = t.backward(gz).unwrap();
        for v in &vars {
            let expected = g_f.wrt(*v) * 2.5 + g_g.wrt(*v) * -1.5;
            assert!((g_combo.wrt(*v) - expected).abs().max() < 1e-12);
        }
    }

    #[test]
    fn attention_is_execution_independent() {
        let q = mat(150, 4, 11);
        let k = mat(90, 4, 12);
        let v = mat(90, 3, 13);
        let a = attention_forward(&q, &k, &v, 0.5, Execution::Sequential);
        let b = attention_forward(&q, &k, &v, 0.5, Execution::Parallel);
        assert_eq!(a, b);
        let mut t = Tape::new();
        let qv = t.leaf(q.clone());
        let kv = t.leaf(k.clone());
        let vv = t.leaf(v.clone());
        let att = t.attention(qv, kv, vv, 0.5);
        let mut z = q.rows(0, 150) * k.transpose() * 0.5;
        softmax_rows(&mut z);
        assert!((t.value(att) - z * &v).abs().max() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut params = vec![mat(2, 2, 1)];
        let before = params.clone();
        let mut st = AdamState::new(AdamConfig::default(), &params);
        st.step(&mut params, &[DMatrix::zeros(2, 2)]).unwrap();
        assert_eq!(params, before);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn adam_first_step_is_sign_scaled() {
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let g = DMatrix::from_row_slice(1, 3, &[0.5, -2.0, 1e-3]);
        let mut params = vec![DMatrix::zeros(1, 3)];
        let mut st = AdamState::new(cfg, &params);
        st.step(&mut params, std::slice::from_ref(&g)).unwrap();
        for j in 0..3 {
            let expected = -0.1 * g[j] / (g[j].abs() + 1e-8);
            assert_relative_eq!(params[0][j], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn adam_decreases_quadratic() {
        let mut params = vec![DMatrix::from_element(1, 1, 1.0)];
        let mut st = AdamState::new(AdamConfig { lr: 0.1, ..Default::default() }, &params);
        let mut prev = 1.0;
        for _ in 0..2 {
            let g = &params[0] * 2.0;
            st.step(&mut params, &[g]).unwrap();
            let x = params[0][(0, 0)];
            assert!(x * x < prev * prev);
            prev = x;
        }
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut params = vec![DMatrix::zeros(2, 2)];
        let mut st = AdamState::new(AdamConfig::default(), &params);
        assert!(st.step(&mut params, &[DMatrix::zeros(3, 2)]).is_err());
    }

    #[test]
    fn grad_check_reports_small_errors_on_simple_cases() {
        let x = vec![mat(3, 3, 2)];
        assert!(grad_check(|t, p| t.trace(p[0]), &x, 1e-5).unwrap() < 1e-8);
        let x = vec![DMatrix::from_row_slice(1, 2, &[1.0, 2.0])];
        assert!(grad_check(|t, p| t.sq_frobenius(p[0]), &x, 1e-5).unwrap() < 1e-8);
    }
}
