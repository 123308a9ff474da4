//! Argument definitions and the implementation of every subcommand.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fmap_core::eigensolver::{DEFAULT_K, DEFAULT_MAX_ITER, DEFAULT_TOL};
use fmap_core::fmap_optimizer::{OptimizationReport, OptimizerConfig};
use fmap_core::interchange::npy::{self, Dtype, Tensor};
use fmap_core::interchange::{load_feature_grid, load_keypoints, FeatureGrid, ScalarFunction};
use fmap_core::laplacian::SigmaMode;
use fmap_core::metrics::{self, EvalConventions, EvalCounts, EvalReport};
use fmap_core::pipeline::match_pair;
use fmap_core::pointmap_transfer::{
    clamp_for_display, pointmap_to_image_flow, transfer_function, CorrespondenceField, FlowField,
};
use fmap_core::refine_net::RefineConfig;
use fmap_core::FmapError;
use nalgebra::DMatrix;
use serde::Serialize;

use crate::cache::{basis_for, read_basis, write_basis, BasisMeta, BasisRequest, CacheOutcome, StoredBasis};
use crate::error::{CliError, CliResult, Stage};
use crate::render::{self, matrix_image, min_max, rainbow, rainbow_legend, scalar_image, signed_image};

#[derive(Debug, Parser)]
#[command(name = "fmap", version, about = "Dense image correspondence with spectral functional maps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute (or fetch from the cache) the Laplacian eigenbasis of a feature grid.
    Basis(BasisArgs),
    /// Optimize the functional map between two images and extract the dense flow.
    Match(MatchArgs),
    /// Transfer a scalar function through a functional map.
    Transfer(TransferArgs),
    /// Score a flow against keypoint or dense ground truth.
    Eval(EvalArgs),
    /// Render an artifact as a PNG.
    Viz(VizArgs),
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    /// Number of eigenpairs (clamped to n - 1).
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    pub max_iter: usize,
    #[arg(long, default_value = "values")]
    pub sigma_mode: SigmaMode,
    #[arg(long, env = "FMAP_CACHE_DIR")]
    pub cache_dir: Option<PathBuf>,
}

impl SolverArgs {
    fn request(&self, k: usize) -> BasisRequest {
        BasisRequest {
            k,
            tol: self.tol,
            seed: self.seed,
            max_iter: self.max_iter,
            sigma_mode: self.sigma_mode,
        }
    }
}

#[derive(Debug, Args)]
pub struct BasisArgs {
    #[arg(long = "basis-features", visible_alias = "features")]
    pub features: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Output stem; writes `<out>.npy` and `<out>.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Source and target features defining the Laplacians.
    #[arg(long = "basis-features", num_args = 2, value_names = ["M", "N"], required = true)]
    pub basis_features: Vec<PathBuf>,
    /// Source and target descriptors used by the losses.
    #[arg(long = "loss-features", num_args = 2, value_names = ["M", "N"], required = true)]
    pub loss_features: Vec<PathBuf>,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value_t = 600)]
    pub iterations: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 5.0)]
    pub lambda_diag: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lambda_cons: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_z: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_reg: f64,
    #[arg(long, default_value_t = 20)]
    pub latent_r: usize,
    /// Optimize on the raw descriptors without the refinement network.
    #[arg(long)]
    pub no_refine: bool,
    #[arg(long, default_value_t = 128)]
    pub d_model: usize,
    #[arg(long, default_value_t = 256)]
    pub hidden: usize,
    #[arg(long, default_value_t = 1)]
    pub blocks: usize,
    /// Record wall-clock time in the report (makes reports differ between runs).
    #[arg(long)]
    pub timing: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    /// Functional map `C` as a `(k, k)` tensor.
    #[arg(long)]
    pub fmap: PathBuf,
    #[arg(long = "basis-features", num_args = 2, value_names = ["M", "N"], required = true)]
    pub basis_features: Vec<PathBuf>,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Function on the source grid, `(h, w)` or `(h, w, 1)`.
    #[arg(long)]
    pub function: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub scale: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Flow `(h, w, 2)` at grid or image resolution.
    #[arg(long)]
    pub flow: PathBuf,
    /// Keypoint annotations (JSON).
    #[arg(long)]
    pub keypoints: Option<PathBuf>,
    /// Dense ground-truth flow at the resolution of the evaluated flow.
    #[arg(long)]
    pub gt_flow: Option<PathBuf>,
    /// Validity mask `(h, w)`; non-zero entries are evaluated.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2")]
    pub alpha: Vec<f64>,
    /// Target grid `HxW` of a grid-resolution flow (defaults to the source grid).
    #[arg(long, value_parser = parse_dims)]
    pub target_grid: Option<(usize, usize)>,
    /// Free-form label copied into the report.
    #[arg(long)]
    pub group: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VizMode {
    Eigenfunction,
    Rainbow,
    Transfer,
    FmapMatrix,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[arg(long, value_enum)]
    pub mode: VizMode,
    /// Basis stem (eigenfunction), flow (rainbow), function (transfer) or map (fmap-matrix).
    #[arg(long)]
    pub input: PathBuf,
    /// 1-based eigenfunction index.
    #[arg(long, default_value_t = 1)]
    pub index: usize,
    #[arg(long, default_value_t = 8)]
    pub scale: usize,
    #[arg(long, value_parser = parse_dims)]
    pub target_grid: Option<(usize, usize)>,
    /// Also write the coordinate legend (rainbow mode).
    #[arg(long)]
    pub legend: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s}"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad height in {s}"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad width in {s}"))?;
    if h == 0 || w == 0 {
        return Err(format!("dimensions must be positive, got {s}"));
    }
    Ok((h, w))
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Basis(a) => cmd_basis(&a),
        Command::Match(a) => cmd_match(&a),
        Command::Transfer(a) => cmd_transfer(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Viz(a) => cmd_viz(&a),
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)
        .map_err(|e| FmapError::Io {
            path: dir.to_path_buf(),
            source: e,
        })
        .stage("create output directory")
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> fmap_core::Result<()> {
    let mut text = serde_json::to_vec_pretty(value).map_err(|e| FmapError::Format(e.to_string()))?;
    text.push(b'\n');
    npy::write_atomic(path, &text)
}

fn load_grid(path: &Path, role: &str) -> CliResult<FeatureGrid> {
    load_feature_grid(path).stage(format!("load {role} {}", path.display()))
}

fn describe(outcome: CacheOutcome) -> &'static str {
    match outcome {
        CacheOutcome::Hit => "cache hit",
        CacheOutcome::Miss => "computed and cached",
        CacheOutcome::Repaired => "cache entry rebuilt",
        CacheOutcome::Disabled => "computed (no cache)",
    }
}

fn obtain_basis(grid: &FeatureGrid, solver: &SolverArgs, k: usize, role: &str) -> CliResult<StoredBasis> {
    let (stored, outcome) = basis_for(grid, &solver.request(k), solver.cache_dir.as_deref())
        .stage(format!("eigenbasis ({role})"))?;
    log::info!(
        "{role} basis: k = {}, sigma = {:.6e}, max residual = {:.3e}, {}",
        stored.meta.k,
        stored.meta.sigma,
        stored.meta.max_residual(),
        describe(outcome)
    );
    Ok(stored)
}

pub fn cmd_basis(a: &BasisArgs) -> CliResult<()> {
    let grid = load_grid(&a.features, "basis features")?;
    let stored = obtain_basis(&grid, &a.solver, a.solver.k.unwrap_or(DEFAULT_K), "features")?;
    if let Some(out) = &a.out {
        write_basis(out, &stored).stage("write basis")?;
    }
    let m = &stored.meta;
    println!(
        "basis {}x{} k={} sigma={:.6e} lambda=[{:.6e}, {:.6e}] max_residual={:.3e}",
        m.grid[0],
        m.grid[1],
        m.k,
        m.sigma,
        m.eigenvalues.first().copied().unwrap_or(0.0),
        m.eigenvalues.last().copied().unwrap_or(0.0),
        m.max_residual()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct InputRecord {
    path: String,
    grid: [usize; 3],
    source_image_size: [usize; 2],
    provenance: String,
    feature_hash: String,
}

impl InputRecord {
    fn new(path: &Path, g: &FeatureGrid) -> Self {
        InputRecord {
            path: path.display().to_string(),
            grid: [g.height(), g.width(), g.dim()],
            source_image_size: [g.source_image_size.0, g.source_image_size.1],
            provenance: g.provenance.clone(),
            feature_hash: crate::cache::feature_hash(g),
        }
    }
}

#[derive(Debug, Serialize)]
struct BasisSummary {
    k: usize,
    sigma: f64,
    sigma_mode: SigmaMode,
    tol: f64,
    seed: u64,
    max_residual: f64,
    laplacian_hash: String,
    eigenvalues: Vec<f64>,
}

impl From<&BasisMeta> for BasisSummary {
    fn from(m: &BasisMeta) -> Self {
        BasisSummary {
            k: m.k,
            sigma: m.sigma,
            sigma_mode: m.sigma_mode,
            tol: m.tol,
            seed: m.seed,
            max_residual: m.max_residual(),
            laplacian_hash: m.laplacian_hash.clone(),
            eigenvalues: m.eigenvalues.clone(),
        }
    }
}

#[derive(Debug, Serialize)]
struct PointMapSummary {
    source_grid: [usize; 2],
    target_grid: [usize; 2],
    grid_flow_smoothness: f64,
    image_flow_size: [usize; 2],
}

#[derive(Debug, Default, Serialize)]
struct MatchReport {
    status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    inputs: BTreeMap<String, InputRecord>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    bases: BTreeMap<String, BasisSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    optimization: Option<OptimizationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pointmap: Option<PointMapSummary>,
    conventions: BTreeMap<&'static str, &'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_time_seconds: Option<f64>,
}

fn match_conventions() -> BTreeMap<&'static str, &'static str> {
    BTreeMap::from([
        ("flow", "target minus source, (dx, dy), x rightward, y downward"),
        ("flow.npy", "feature-grid units over the source grid"),
        ("flow_image.npy", "pixels over the source image, patch centres interpolated bilinearly"),
        ("fmap.npy", "C maps source coefficients to target coefficients, b = C a"),
    ])
}

pub fn cmd_match(a: &MatchArgs) -> CliResult<()> {
    ensure_dir(&a.out)?;
    let start = Instant::now();
    let mut report = MatchReport {
        conventions: match_conventions(),
        ..Default::default()
    };
    let result = match_inner(a, &mut report);
    report.status = if result.is_ok() { "ok" } else { "failed" }.to_string();
    if let Err(e) = &result {
        report.error = Some(e.to_string());
    }
    if a.timing {
        report.wall_time_seconds = Some(start.elapsed().as_secs_f64());
    }
    let written = write_json(&report, &a.out.join("report.json")).stage("write report");
    result.and(written)
}

fn match_inner(a: &MatchArgs, report: &mut MatchReport) -> CliResult<()> {
    let bm = load_grid(&a.basis_features[0], "basis features (source)")?;
    let bn = load_grid(&a.basis_features[1], "basis features (target)")?;
    let fm = load_grid(&a.loss_features[0], "loss features (source)")?;
    let fn_ = load_grid(&a.loss_features[1], "loss features (target)")?;
    for (key, path, g) in [
        ("basis_source", &a.basis_features[0], &bm),
        ("basis_target", &a.basis_features[1], &bn),
        ("loss_source", &a.loss_features[0], &fm),
        ("loss_target", &a.loss_features[1], &fn_),
    ] {
        report.inputs.insert(key.to_string(), InputRecord::new(path, g));
    }

    let k = a.solver.k.unwrap_or(DEFAULT_K);
    let sm = obtain_basis(&bm, &a.solver, k, "source")?;
    let sn = obtain_basis(&bn, &a.solver, k, "target")?;
    report.bases.insert("source".into(), (&sm.meta).into());
    report.bases.insert("target".into(), (&sn.meta).into());
    // Both bases must share k; clamping can differ on unequal grids.
    let k = sm.basis.k().min(sn.basis.k());
    let (basis_m, basis_n) = (sm.basis.truncated(k), sn.basis.truncated(k));

    let config = OptimizerConfig {
        lambda_diag: a.lambda_diag,
        lambda_cons: a.lambda_cons,
        lambda_z: a.lambda_z,
        lambda_reg: a.lambda_reg,
        iterations: a.iterations,
        lr: a.lr,
        seed: a.solver.seed,
        latent_r: a.latent_r,
        refine: (!a.no_refine).then_some(RefineConfig {
            d_model: a.d_model,
            hidden: a.hidden,
            blocks: a.blocks,
        }),
        ..Default::default()
    };
    let (outcome, opt_report) = match_pair(&basis_m, &basis_n, &fm, &fn_, &config);
    report.optimization = Some(opt_report);
    let outcome = outcome.stage("optimize functional map")?;
    log::info!(
        "optimized {} iterations, final loss {:.6e}",
        a.iterations,
        report.optimization.as_ref().map_or(f64::NAN, |r| r.final_terms.total)
    );

    let corr = &outcome.correspondence;
    let grid_flow = corr.grid_flow();
    let image_flow = pointmap_to_image_flow(corr, bm.source_image_size, bn.source_image_size).stage("upsample flow")?;
    report.pointmap = Some(PointMapSummary {
        source_grid: [corr.src_dims.0, corr.src_dims.1],
        target_grid: [corr.tgt_dims.0, corr.tgt_dims.1],
        grid_flow_smoothness: metrics::smoothness(&grid_flow).stage("flow smoothness")?,
        image_flow_size: [image_flow.height, image_flow.width],
    });

    let c = &outcome.fmap.c;
    let c_tensor = Tensor::new(vec![c.nrows(), c.ncols()], row_major(c), Dtype::F64).stage("functional map")?;
    npy::write(&c_tensor, a.out.join("fmap.npy")).stage("write functional map")?;
    npy::write(&grid_flow.to_tensor(), a.out.join("flow.npy")).stage("write flow")?;
    npy::write(&image_flow.to_tensor(), a.out.join("flow_image.npy")).stage("write image flow")?;
    Ok(())
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).flat_map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect()
}

fn read_matrix(path: &Path, stage: &str) -> CliResult<DMatrix<f64>> {
    let t = npy::read(path).stage(format!("{stage} {}", path.display()))?;
    match t.shape.as_slice() {
        [r, c] => Ok(DMatrix::from_row_slice(*r, *c, &t.data)),
        other => Err(FmapError::Shape(format!("expected a matrix, got shape {other:?}"))).stage(stage),
    }
}

#[derive(Debug, Serialize)]
struct TransferReport {
    k: usize,
    source_grid: [usize; 2],
    target_grid: [usize; 2],
    /// `‖f − ΦΦᵗf‖ / ‖f‖` on the source grid.
    out_of_span_relative: f64,
    source_range: [f64; 2],
    target_range: [f64; 2],
}

pub fn cmd_transfer(a: &TransferArgs) -> CliResult<()> {
    let c = read_matrix(&a.fmap, "load functional map")?;
    let bm = load_grid(&a.basis_features[0], "basis features (source)")?;
    let bn = load_grid(&a.basis_features[1], "basis features (target)")?;
    let t = npy::read(&a.function).stage(format!("load function {}", a.function.display()))?;
    let f = ScalarFunction::from_tensor(&t).stage("load function")?;
    if let Some(k) = a.solver.k {
        if k != c.nrows() {
            return Err(FmapError::Argument(format!("--k {k} disagrees with a {}x{} map", c.nrows(), c.ncols())))
                .stage("transfer");
        }
    }
    let sm = obtain_basis(&bm, &a.solver, c.ncols(), "source")?;
    let sn = obtain_basis(&bn, &a.solver, c.nrows(), "target")?;
    let g = transfer_function(&c, &sm.basis, &sn.basis, &f).stage("transfer")?;

    let phi = &sm.basis.vectors;
    let fv = nalgebra::DVector::from_column_slice(&f.values);
    let recon = phi * phi.tr_mul(&fv);
    let norm = fv.norm();
    let (lo, hi) = min_max(&f.values);
    let report = TransferReport {
        k: c.nrows(),
        source_grid: [f.height, f.width],
        target_grid: [g.height, g.width],
        out_of_span_relative: if norm > 0.0 { (fv - recon).norm() / norm } else { 0.0 },
        source_range: [lo, hi],
        target_range: {
            let (a, b) = min_max(&g.values);
            [a, b]
        },
    };

    ensure_dir(&a.out)?;
    npy::write(&g.to_tensor(), a.out.join("transferred.npy")).stage("write transferred function")?;
    let shown = clamp_for_display(&g, lo, hi);
    let left = scalar_image(&f.values, f.height, f.width, lo, hi, render::heat).upscale(a.scale);
    let right = scalar_image(&shown.values, g.height, g.width, lo, hi, render::heat).upscale(a.scale);
    left.beside(&right, a.scale.max(2))
        .write_png(&a.out.join("transfer.png"))
        .stage("write transfer panel")?;
    write_json(&report, &a.out.join("transfer_report.json")).stage("write transfer report")
}

fn flow_to_image_resolution(
    flow: FlowField,
    src_image: (usize, usize),
    tgt_image: (usize, usize),
    target_grid: Option<(usize, usize)>,
) -> CliResult<FlowField> {
    if (flow.height, flow.width) == src_image {
        return Ok(flow);
    }
    let (th, tw) = target_grid.unwrap_or((flow.height, flow.width));
    let targets = (0..flow.height * flow.width)
        .map(|i| {
            let v = flow.data[i];
            let tx = ((i % flow.width) as f64 + v[0]).round().clamp(0.0, (tw - 1) as f64) as usize;
            let ty = ((i / flow.width) as f64 + v[1]).round().clamp(0.0, (th - 1) as f64) as usize;
            ty * tw + tx
        })
        .collect();
    let corr = CorrespondenceField {
        src_dims: (flow.height, flow.width),
        tgt_dims: (th, tw),
        targets,
    };
    pointmap_to_image_flow(&corr, src_image, tgt_image).stage("upsample flow")
}

fn read_mask(path: &Path, n: usize) -> CliResult<Vec<bool>> {
    let t = npy::read(path).stage(format!("load mask {}", path.display()))?;
    if t.data.len() != n || !(t.rank() == 2 || (t.rank() == 3 && t.shape[2] == 1)) {
        return Err(FmapError::Shape(format!("mask of shape {:?} does not cover {n} pixels", t.shape)))
            .stage("load mask");
    }
    Ok(t.data.iter().map(|&v| v != 0.0).collect())
}

fn alpha_key(alpha: f64) -> String {
    format!("{alpha}")
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let t = npy::read(&a.flow).stage(format!("load flow {}", a.flow.display()))?;
    let mut flow = FlowField::from_tensor(&t).stage("load flow")?;
    let kps = match &a.keypoints {
        Some(p) => Some(load_keypoints(p).stage(format!("load keypoints {}", p.display()))?),
        None => None,
    };
    if kps.is_none() && a.gt_flow.is_none() {
        return Err(FmapError::Argument("provide --keypoints, --gt-flow, or both".into())).stage("eval");
    }
    let mut conventions = EvalConventions::default();
    if let Some(k) = &kps {
        let src = (k.src_size[0], k.src_size[1]);
        let tgt = (k.tgt_size[0], k.tgt_size[1]);
        flow = flow_to_image_resolution(flow, src, tgt, a.target_grid)?;
    } else {
        conventions.resolution = "as given".into();
    }

    let mut pck = BTreeMap::new();
    let mut mse = None;
    let mut threshold_dims = (0, 0);
    let mut keypoints = 0;
    if let Some(k) = &kps {
        let pred = metrics::warp_keypoints(&flow, &k.sources());
        let gt = k.targets();
        threshold_dims = k.threshold_dims();
        for &alpha in &a.alpha {
            pck.insert(alpha_key(alpha), metrics::pck(&pred, &gt, threshold_dims, alpha).stage("pck")?);
        }
        mse = Some(metrics::mse_keypoints(&pred, &gt).stage("mse")?);
        keypoints = gt.len();
    }

    let mut epe = None;
    let mut masked = 0;
    if let Some(p) = &a.gt_flow {
        let t = npy::read(p).stage(format!("load ground-truth flow {}", p.display()))?;
        let gt = FlowField::from_tensor(&t).stage("load ground-truth flow")?;
        let mask = match &a.mask {
            Some(m) => Some(read_mask(m, gt.data.len())?),
            None => None,
        };
        masked = mask.as_ref().map_or(gt.data.len(), |m| m.iter().filter(|&&v| v).count());
        if a.mask.is_some() {
            conventions.epe_mask = "pixels with non-zero mask".into();
        }
        epe = Some(metrics::epe(&flow, &gt, mask.as_deref()).stage("epe")?);
    }

    let report = EvalReport {
        pck,
        epe,
        smoothness: metrics::smoothness(&flow).stage("smoothness")?,
        mse,
        threshold_dims,
        counts: EvalCounts {
            keypoints,
            flow_pixels: flow.data.len(),
            masked_pixels: masked,
        },
        conventions,
        group: a.group.clone(),
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_json(&report, &a.out).stage("write evaluation report")?;
    println!("{}", serde_json::to_string(&report).unwrap_or_default());
    Ok(())
}

fn mismatch(mode: &str, detail: String) -> CliError {
    CliError {
        stage: format!("viz {mode}"),
        source: FmapError::Shape(detail),
    }
}

pub fn cmd_viz(a: &VizArgs) -> CliResult<()> {
    let image = match a.mode {
        VizMode::Eigenfunction => {
            let stem = a.input.with_extension("");
            let stored = read_basis(&stem).stage(format!("viz eigenfunction: load basis {}", stem.display()))?;
            let b = &stored.basis;
            if a.index == 0 || a.index > b.k() {
                return Err(FmapError::Argument(format!("index must lie in 1..={}, got {}", b.k(), a.index)))
                    .stage("viz eigenfunction");
            }
            let col: Vec<f64> = b.vectors.column(a.index - 1).iter().copied().collect();
            signed_image(&col, b.height, b.width)
        }
        VizMode::Rainbow => {
            let t = npy::read(&a.input).stage(format!("viz rainbow: load {}", a.input.display()))?;
            if !matches!(t.shape.as_slice(), [_, _, 2]) {
                return Err(mismatch("rainbow", format!("expected a (h, w, 2) flow, got {:?}", t.shape)));
            }
            let f = FlowField::from_tensor(&t).stage("viz rainbow")?;
            let tgt = a.target_grid.unwrap_or((f.height, f.width));
            if let Some(p) = &a.legend {
                rainbow_legend(tgt.0, tgt.1).upscale(a.scale).write_png(p).stage("write legend")?;
            }
            rainbow(&f.data, f.height, f.width, tgt)
        }
        VizMode::Transfer => {
            let t = npy::read(&a.input).stage(format!("viz transfer: load {}", a.input.display()))?;
            if !matches!(t.shape.as_slice(), [_, _] | [_, _, 1]) {
                return Err(mismatch("transfer", format!("expected an (h, w) or (h, w, 1) function, got {:?}", t.shape)));
            }
            let f = ScalarFunction::from_tensor(&t).stage("viz transfer")?;
            let (lo, hi) = min_max(&f.values);
            scalar_image(&f.values, f.height, f.width, lo, hi, render::heat)
        }
        VizMode::FmapMatrix => {
            let t = npy::read(&a.input).stage(format!("viz fmap-matrix: load {}", a.input.display()))?;
            match t.shape.as_slice() {
                [r, c] if r == c => matrix_image(&t.data, *r, *c),
                other => return Err(mismatch("fmap-matrix", format!("expected a square matrix, got {other:?}"))),
            }
        }
    };
    image.upscale(a.scale).write_png(&a.out).stage("write image")
}
