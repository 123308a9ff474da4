//! Content-addressed storage of spectral bases.
//!
//! A basis lives in two files sharing a stem: `<stem>.npy` holds the `n × k`
//! eigenvectors as `<f8`, `<stem>.json` the metadata together with the
//! SHA-256 of the `.npy` bytes.

use std::fs;
use std::path::{Path, PathBuf};

use fmap_core::eigensolver::{LobpcgOptions, SpectralBasis};
use fmap_core::interchange::npy::{self, Dtype, Tensor};
use fmap_core::interchange::FeatureGrid;
use fmap_core::laplacian::SigmaMode;
use fmap_core::pipeline::compute_basis;
use fmap_core::{FmapError, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const FORMAT_VERSION: u32 = 1;

/// Every input that changes the computed basis.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisRequest {
    pub k: usize,
    pub tol: f64,
    pub seed: u64,
    pub max_iter: usize,
    pub sigma_mode: SigmaMode,
}

impl BasisRequest {
    pub fn options(&self) -> LobpcgOptions {
        LobpcgOptions {
            k: self.k,
            tol: self.tol,
            max_iter: self.max_iter,
            seed: self.seed,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisMeta {
    pub version: u32,
    pub key: String,
    pub feature_hash: String,
    pub laplacian_hash: String,
    pub k: usize,
    pub requested_k: usize,
    pub tol: f64,
    pub seed: u64,
    pub max_iter: usize,
    pub sigma_mode: SigmaMode,
    pub sigma: f64,
    pub grid: [usize; 2],
    pub eigenvalues: Vec<f64>,
    pub residual_norms: Vec<f64>,
    pub payload_sha256: String,
}

impl BasisMeta {
    pub fn max_residual(&self) -> f64 {
        self.residual_norms.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct StoredBasis {
    pub basis: SpectralBasis,
    pub meta: BasisMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheOutcome {
    Hit,
    Miss,
    /// An entry existed but failed verification and was rebuilt.
    Repaired,
    Disabled,
}

/// SHA-256 over shape and raw `f32` bits of a feature grid.
pub fn feature_hash(grid: &FeatureGrid) -> String {
    let mut h = Sha256::new();
    for s in [grid.height(), grid.width(), grid.dim()] {
        h.update((s as u64).to_le_bytes());
    }
    for v in grid.data() {
        h.update(v.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn cache_key(feature_hash: &str, req: &BasisRequest) -> String {
    let mut h = Sha256::new();
    h.update(format!(
        "v{FORMAT_VERSION}|{feature_hash}|k={}|tol={:e}|seed={}|max_iter={}|sigma={}",
        req.k, req.tol, req.seed, req.max_iter, req.sigma_mode
    ));
    hex::encode(h.finalize())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn json_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

fn npy_path(stem: &Path) -> PathBuf {
    stem.with_extension("npy")
}

/// Writes `<stem>.npy` and `<stem>.json`.
pub fn write_basis(stem: &Path, stored: &StoredBasis) -> Result<()> {
    let b = &stored.basis;
    let (n, k) = b.vectors.shape();
    let mut data = Vec::with_capacity(n * k);
    for i in 0..n {
        data.extend(b.vectors.row(i).iter());
    }
    let bytes = npy::encode(&Tensor::new(vec![n, k], data, Dtype::F64)?)?;
    let mut meta = stored.meta.clone();
    meta.payload_sha256 = sha256_hex(&bytes);
    let json = serde_json::to_vec_pretty(&meta).map_err(|e| FmapError::Format(e.to_string()))?;
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| FmapError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    npy::write_atomic(&npy_path(stem), &bytes)?;
    npy::write_atomic(&json_path(stem), &json)
}

/// Reads a basis pair, verifying the payload hash and shapes.
pub fn read_basis(stem: &Path) -> Result<StoredBasis> {
    let jp = json_path(stem);
    let text = fs::read(&jp).map_err(|e| FmapError::Io { path: jp.clone(), source: e })?;
    let meta: BasisMeta = serde_json::from_slice(&text)
        .map_err(|e| FmapError::Format(format!("{}: {e}", jp.display())))?;
    let np = npy_path(stem);
    let bytes = fs::read(&np).map_err(|e| FmapError::Io { path: np.clone(), source: e })?;
    if sha256_hex(&bytes) != meta.payload_sha256 {
        return Err(FmapError::Validation(format!("{} does not match its recorded hash", np.display())));
    }
    let t = npy::decode(&bytes)?;
    let [h, w] = meta.grid;
    if t.shape != [h * w, meta.k] || meta.eigenvalues.len() != meta.k || meta.residual_norms.len() != meta.k {
        return Err(FmapError::Validation(format!("{} is inconsistent with its metadata", np.display())));
    }
    let basis = SpectralBasis {
        eigenvalues: meta.eigenvalues.clone(),
        vectors: DMatrix::from_row_slice(h * w, meta.k, &t.data),
        residual_norms: meta.residual_norms.clone(),
        height: h,
        width: w,
        content_hash: meta.laplacian_hash.clone(),
    };
    Ok(StoredBasis { basis, meta })
}

pub fn compute_stored(grid: &FeatureGrid, req: &BasisRequest) -> Result<StoredBasis> {
    let fh = feature_hash(grid);
    let result = compute_basis(grid, req.sigma_mode, &req.options())?;
    let b = result.basis;
    let meta = BasisMeta {
        version: FORMAT_VERSION,
        key: cache_key(&fh, req),
        feature_hash: fh,
        laplacian_hash: b.content_hash.clone(),
        k: b.k(),
        requested_k: req.k,
        tol: req.tol,
        seed: req.seed,
        max_iter: req.max_iter,
        sigma_mode: req.sigma_mode,
        sigma: result.sigma,
        grid: [b.height, b.width],
        eigenvalues: b.eigenvalues.clone(),
        residual_norms: b.residual_norms.clone(),
        payload_sha256: String::new(),
    };
    Ok(StoredBasis { basis: b, meta })
}

/// Loads the basis for `grid` from `cache_dir`, computing and storing it on a
/// miss. Damaged entries are rebuilt with a warning.
pub fn basis_for(grid: &FeatureGrid, req: &BasisRequest, cache_dir: Option<&Path>) -> Result<(StoredBasis, CacheOutcome)> {
    let Some(dir) = cache_dir else {
        return Ok((compute_stored(grid, req)?, CacheOutcome::Disabled));
    };
    let key = cache_key(&feature_hash(grid), req);
    let stem = dir.join(&key);
    let mut outcome = CacheOutcome::Miss;
    if json_path(&stem).exists() || npy_path(&stem).exists() {
        match read_basis(&stem) {
            Ok(stored) if stored.meta.key == key => return Ok((stored, CacheOutcome::Hit)),
            Ok(_) => {
                log::warn!("cache entry {key} carries a different key; recomputing");
                outcome = CacheOutcome::Repaired;
            }
            Err(e) => {
                log::warn!("cache entry {key} is unusable ({e}); recomputing");
                outcome = CacheOutcome::Repaired;
            }
        }
    }
    let mut stored = compute_stored(grid, req)?;
    write_basis(&stem, &stored)?;
    // Pick up the payload hash written alongside.
    stored.meta = read_basis(&stem)?.meta;
    Ok((stored, outcome))
}
