//! From functional maps to pixel correspondences and transferred functions.

use nalgebra::{DMatrix, DVector};

use crate::eigensolver::SpectralBasis;
use crate::error::{FmapError, Result};
use crate::interchange::{bilinear_sample, Dtype, ScalarFunction, Tensor};
use crate::par::{self, Execution};

/// Source rows handled per parallel task in the nearest-neighbour search.
const NN_BLOCK: usize = 32;

/// A dense 2D vector field, `(dx, dy)` per node, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub data: Vec<[f64; 2]>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, data: Vec<[f64; 2]>) -> Result<Self> {
        if data.len() != height * width {
            return Err(FmapError::Shape(format!(
                "flow on a {height}x{width} grid needs {} vectors, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !(v[0].is_finite() && v[1].is_finite())) {
            return Err(FmapError::Validation("flow has non-finite vectors".into()));
        }
        Ok(FlowField { height, width, data })
    }

    pub fn constant(height: usize, width: usize, v: [f64; 2]) -> Self {
        FlowField {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> [f64; 2] {
        self.data[y * self.width + x]
    }

    /// Bilinear value at fractional pixel coordinates, clamped to the field.
    pub fn sample(&self, y: f64, x: f64) -> [f64; 2] {
        let flat: Vec<f64> = self.data.iter().flat_map(|v| *v).collect();
        let mut out = [0.0; 2];
        bilinear_sample(&flat, self.height, self.width, 2, y, x, &mut out);
        out
    }

    /// `(h, w, 2)` float32 with channels `(dx, dy)`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.height, self.width, 2],
            data: self.data.iter().flat_map(|v| *v).collect(),
            dtype: Dtype::F32,
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape.as_slice() {
            [h, w, 2] => Self::new(*h, *w, t.data.chunks_exact(2).map(|c| [c[0], c[1]]).collect()),
            other => Err(FmapError::Shape(format!("flow tensor must be (h, w, 2), got {other:?}"))),
        }
    }
}

/// Target node for every source node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrespondenceField {
    pub src_dims: (usize, usize),
    pub tgt_dims: (usize, usize),
    pub targets: Vec<usize>,
}

impl CorrespondenceField {
    pub fn identity(h: usize, w: usize) -> Self {
        CorrespondenceField {
            src_dims: (h, w),
            tgt_dims: (h, w),
            targets: (0..h * w).collect(),
        }
    }

    /// Flow in feature-grid units: `coords(y(x)) − coords(x)`.
    pub fn grid_flow(&self) -> FlowField {
        let (_, sw) = self.src_dims;
        let (_, tw) = self.tgt_dims;
        let data = self
            .targets
            .iter()
            .enumerate()
            .map(|(s, &t)| {
                [
                    (t % tw) as f64 - (s % sw) as f64,
                    (t / tw) as f64 - (s / sw) as f64,
                ]
            })
            .collect();
        FlowField {
            height: self.src_dims.0,
            width: self.src_dims.1,
            data,
        }
    }
}

fn grid_dims(basis: &SpectralBasis) -> Result<(usize, usize)> {
    if basis.height * basis.width != basis.nodes() {
        return Err(FmapError::Shape(format!(
            "basis over {} nodes carries no matching grid ({}x{})",
            basis.nodes(),
            basis.height,
            basis.width
        )));
    }
    Ok((basis.height, basis.width))
}

fn check_map(c: &DMatrix<f64>, basis_m: &SpectralBasis, basis_n: &SpectralBasis) -> Result<()> {
    if c.shape() != (basis_n.k(), basis_m.k()) {
        return Err(FmapError::Argument(format!(
            "map of shape {:?} does not connect bases of sizes {} (source) and {} (target)",
            c.shape(),
            basis_m.k(),
            basis_n.k()
        )));
    }
    Ok(())
}

/// Index of the row of `candidates` nearest to `query`, smallest index on ties.
pub fn nearest_row(query: &[f64], candidates: &DMatrix<f64>) -> usize {
    let k = query.len();
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for j in 0..candidates.nrows() {
        let mut d = 0.0;
        for c in 0..k {
            let e = query[c] - candidates[(j, c)];
            d += e * e;
        }
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Exact nearest neighbour of every row of `queries` among the rows of `candidates`.
pub fn nearest_rows(queries: &DMatrix<f64>, candidates: &DMatrix<f64>, exec: Execution) -> Vec<usize> {
    let n = queries.nrows();
    let k = queries.ncols();
    // Row-major copies keep the inner loop contiguous.
    let q: Vec<f64> = (0..n).flat_map(|i| queries.row(i).iter().copied().collect::<Vec<_>>()).collect();
    let cand_t = candidates.transpose();
    let m = candidates.nrows();
    let mut out = vec![0usize; n];
    par::for_each_chunk_mut(exec, &mut out, NN_BLOCK, |b, chunk| {
        for (o, slot) in chunk.iter_mut().enumerate() {
            let i = b * NN_BLOCK + o;
            let row = &q[i * k..(i + 1) * k];
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for j in 0..m {
                let col = cand_t.column(j);
                let mut d = 0.0;
                for c in 0..k {
                    let e = row[c] - col[c];
                    d += e * e;
                }
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            *slot = best;
        }
    });
    out
}

/// Point map from the functional map: source node `x` is embedded as
/// `row_x(Φᴹ) Cᵗ` and matched to the nearest row of `Φᴺ`.
pub fn fmap_to_pointmap(
    c: &DMatrix<f64>,
    basis_m: &SpectralBasis,
    basis_n: &SpectralBasis,
) -> Result<CorrespondenceField> {
    fmap_to_pointmap_with(c, basis_m, basis_n, Execution::default())
}

pub fn fmap_to_pointmap_with(
    c: &DMatrix<f64>,
    basis_m: &SpectralBasis,
    basis_n: &SpectralBasis,
    exec: Execution,
) -> Result<CorrespondenceField> {
    check_map(c, basis_m, basis_n)?;
    let src_dims = grid_dims(basis_m)?;
    let tgt_dims = grid_dims(basis_n)?;
    let emb = &basis_m.vectors * c.transpose();
    Ok(CorrespondenceField {
        src_dims,
        tgt_dims,
        targets: nearest_rows(&emb, &basis_n.vectors, exec),
    })
}

/// Center of grid cell `i` in pixel coordinates for a cell size `stride`.
fn cell_center(i: usize, stride: f64) -> f64 {
    (i as f64 + 0.5) * stride - 0.5
}

/// Pixel-resolution flow over the source image.
///
/// Each grid node's displacement is measured between patch centers in pixel
/// units of the respective images, then interpolated bilinearly with node
/// `(0, 0)` on pixel `(0, 0)` and the last node on the last pixel.
pub fn pointmap_to_image_flow(
    corr: &CorrespondenceField,
    src_image_size: (usize, usize),
    tgt_image_size: (usize, usize),
) -> Result<FlowField> {
    let (sh, sw) = corr.src_dims;
    let (th, tw) = corr.tgt_dims;
    let (ih, iw) = src_image_size;
    if ih == 0 || iw == 0 || tgt_image_size.0 == 0 || tgt_image_size.1 == 0 {
        return Err(FmapError::Argument("image sizes must be positive".into()));
    }
    let s_sy = ih as f64 / sh as f64;
    let s_sx = iw as f64 / sw as f64;
    let t_sy = tgt_image_size.0 as f64 / th as f64;
    let t_sx = tgt_image_size.1 as f64 / tw as f64;
    let mut knots = Vec::with_capacity(sh * sw * 2);
    for (s, &t) in corr.targets.iter().enumerate() {
        knots.push(cell_center(t % tw, t_sx) - cell_center(s % sw, s_sx));
        knots.push(cell_center(t / tw, t_sy) - cell_center(s / sw, s_sy));
    }
    let fy = if ih > 1 { (sh - 1) as f64 / (ih - 1) as f64 } else { 0.0 };
    let fx = if iw > 1 { (sw - 1) as f64 / (iw - 1) as f64 } else { 0.0 };
    let mut data = Vec::with_capacity(ih * iw);
    let mut v = [0.0; 2];
    for y in 0..ih {
        for x in 0..iw {
            bilinear_sample(&knots, sh, sw, 2, y as f64 * fy, x as f64 * fx, &mut v);
            data.push(v);
        }
    }
    FlowField::new(ih, iw, data)
}

/// Band-limited transfer `g = Φᴺ C Φᴹᵗ f`.
pub fn transfer_function(
    c: &DMatrix<f64>,
    basis_m: &SpectralBasis,
    basis_n: &SpectralBasis,
    f: &ScalarFunction,
) -> Result<ScalarFunction> {
    check_map(c, basis_m, basis_n)?;
    if f.values.len() != basis_m.nodes() {
        return Err(FmapError::Shape(format!(
            "function has {} values, source basis has {} nodes",
            f.values.len(),
            basis_m.nodes()
        )));
    }
    let (h, w) = grid_dims(basis_n)?;
    let a = basis_m.vectors.tr_mul(&DVector::from_column_slice(&f.values));
    let g = &basis_n.vectors * (c * a);
    ScalarFunction::new(h, w, g.iter().copied().collect())
}

/// Clamp to `[lo, hi]`, for rendering band-limited transfers.
pub fn clamp_for_display(f: &ScalarFunction, lo: f64, hi: f64) -> ScalarFunction {
    ScalarFunction {
        height: f.height,
        width: f.width,
        values: f.values.iter().map(|v| v.clamp(lo, hi)).collect(),
    }
}

/// `‖a − b‖₂`; equals the L₂ distance of `Φa` and `Φb` for orthonormal `Φ`.
pub fn spectral_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(FmapError::Shape(format!(
            "coefficient vectors differ in length: {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}
