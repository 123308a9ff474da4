use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::npy::{self, Dtype, Tensor};
use crate::error::{FmapError, Result};

/// Dense `h × w × d` per-patch feature tensor of one image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f32>,
    /// `(H_img, W_img)` of the image the patches were taken from.
    pub source_image_size: (usize, usize),
    pub provenance: String,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(FmapError::Shape(format!(
                "feature grid must be at least 2x2, got {height}x{width}"
            )));
        }
        if dim == 0 {
            return Err(FmapError::Shape("feature grid needs at least one channel".into()));
        }
        if height * width * dim != data.len() {
            return Err(FmapError::Shape(format!(
                "grid {height}x{width}x{dim} needs {} values, got {}",
                height * width * dim,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(FmapError::Validation(format!(
                "non-finite feature value at flat index {i}"
            )));
        }
        Ok(FeatureGrid {
            height,
            width,
            dim,
            data,
            source_image_size: (height, width),
            provenance: "unknown".to_string(),
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        dim: usize,
        f: impl Fn(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * dim);
        for y in 0..height {
            for x in 0..width {
                for c in 0..dim {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, dim, data)
    }

    pub fn with_metadata(mut self, source_image_size: (usize, usize), provenance: impl Into<String>) -> Self {
        self.source_image_size = source_image_size;
        self.provenance = provenance.into();
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of grid nodes `h · w`.
    pub fn nodes(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Feature vector of node `(y, x)`.
    pub fn feature(&self, y: usize, x: usize) -> &[f32] {
        let start = (y * self.width + x) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Node features as an `n × d` matrix in row-major node order.
    pub fn to_matrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_iterator(
            self.nodes(),
            self.dim,
            self.data.iter().map(|&v| v as f64),
        )
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.height, self.width, self.dim],
            data: self.data.iter().map(|&v| v as f64).collect(),
            dtype: Dtype::F32,
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Sidecar {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<String>,
    #[serde(default, alias = "image_size", skip_serializing_if = "Option::is_none")]
    source_image_size: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    backbone: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layer: Option<serde_json::Value>,
}

/// Path of the JSON metadata file that travels with a tensor file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn load_feature_grid(path: impl AsRef<Path>) -> Result<FeatureGrid> {
    let path = path.as_ref();
    let tensor = npy::read(path)?;
    if tensor.rank() != 3 {
        return Err(FmapError::Shape(format!(
            "feature grid must have rank 3 (h, w, d), {} has shape {:?}",
            path.display(),
            tensor.shape
        )));
    }
    let data: Vec<f32> = tensor.data.iter().map(|&v| v as f32).collect();
    let mut grid = FeatureGrid::new(tensor.shape[0], tensor.shape[1], tensor.shape[2], data)?;

    let side = sidecar_path(path);
    if side.exists() {
        let text = fs::read_to_string(&side).map_err(|e| FmapError::io(&side, e))?;
        let meta: Sidecar = serde_json::from_str(&text)
            .map_err(|e| FmapError::Format(format!("{}: {e}", side.display())))?;
        if let Some([h, w]) = meta.source_image_size {
            grid.source_image_size = (h, w);
        }
        grid.provenance = match (meta.provenance, meta.backbone, meta.layer) {
            (Some(p), _, _) => p,
            (None, Some(b), Some(l)) => format!("{b}:{}", l.to_string().trim_matches('"')),
            (None, Some(b), None) => b,
            _ => "unknown".to_string(),
        };
    }
    Ok(grid)
}

/// Writes the tensor file and its metadata sidecar.
pub fn save_feature_grid(grid: &FeatureGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    npy::write(&grid.to_tensor(), path)?;
    let meta = Sidecar {
        provenance: Some(grid.provenance.clone()),
        source_image_size: Some([grid.source_image_size.0, grid.source_image_size.1]),
        ..Default::default()
    };
    let text = serde_json::to_string_pretty(&meta).expect("sidecar serializes");
    npy::write_atomic(&sidecar_path(path), text.as_bytes())
}

/// Align-corners bilinear sampling of an `h × w × d` row-major field at
/// fractional coordinates.
pub(crate) fn bilinear_sample(
    data: &[f64],
    h: usize,
    w: usize,
    d: usize,
    y: f64,
    x: f64,
    out: &mut [f64],
) {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = (y.floor() as usize).min(h - 1);
    let x0 = (x.floor() as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ty = y - y0 as f64;
    let tx = x - x0 as f64;
    for c in 0..d {
        let v00 = data[(y0 * w + x0) * d + c];
        let v01 = data[(y0 * w + x1) * d + c];
        let v10 = data[(y1 * w + x0) * d + c];
        let v11 = data[(y1 * w + x1) * d + c];
        let top = v00 + (v01 - v00) * tx;
        let bottom = v10 + (v11 - v10) * tx;
        out[c] = top + (bottom - top) * ty;
    }
}

/// Bilinear (align-corners) resampling of every channel onto an `h2 × w2` grid.
pub fn resize_feature_grid(grid: &FeatureGrid, h2: usize, w2: usize) -> Result<FeatureGrid> {
    if h2 < 2 || w2 < 2 {
        return Err(FmapError::Argument(format!(
            "target grid must be at least 2x2, got {h2}x{w2}"
        )));
    }
    if (h2, w2) == (grid.height, grid.width) {
        return Ok(grid.clone());
    }
    let (h, w, d) = (grid.height, grid.width, grid.dim);
    let src: Vec<f64> = grid.data.iter().map(|&v| v as f64).collect();
    let sy = (h - 1) as f64 / (h2 - 1) as f64;
    let sx = (w - 1) as f64 / (w2 - 1) as f64;
    let mut data = Vec::with_capacity(h2 * w2 * d);
    let mut px = vec![0.0; d];
    for y in 0..h2 {
        for x in 0..w2 {
            bilinear_sample(&src, h, w, d, y as f64 * sy, x as f64 * sx, &mut px);
            data.extend(px.iter().map(|&v| v as f32));
        }
    }
    let out = FeatureGrid::new(h2, w2, d, data)?;
    Ok(out.with_metadata(grid.source_image_size, grid.provenance.clone()))
}

/// A real-valued function sampled on the nodes of one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarFunction {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ScalarFunction {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(FmapError::Shape(format!(
                "function on a {height}x{width} grid needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FmapError::Validation("scalar function has non-finite values".into()));
        }
        Ok(ScalarFunction {
            height,
            width,
            values,
        })
    }

    /// Accepts `(h, w)` or `(h, w, 1)` tensors.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape.as_slice() {
            [h, w] | [h, w, 1] => Self::new(*h, *w, t.data.clone()),
            other => Err(FmapError::Shape(format!(
                "scalar function tensor must be (h, w) or (h, w, 1), got {other:?}"
            ))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.height, self.width, 1],
            data: self.values.clone(),
            dtype: Dtype::F32,
        }
    }
}
