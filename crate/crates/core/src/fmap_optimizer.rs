//! Joint optimization of the functional map, the latent consistency bases and
//! the refinement network for one image pair.
//!
//! Conventions: `C` maps spectral coefficients of the source image `M` to
//! those of the target `N` (`b = C a`), so `C` has rows indexed by `N`'s
//! eigenfunctions and columns by `M`'s. All matrix norms are Frobenius norms.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::eigensolver::SpectralBasis;
use crate::error::{FmapError, Result};
use crate::grad_engine::{AdamConfig, AdamState, Tape, Var};
use crate::interchange::FeatureGrid;
use crate::refine_net::{positional_embedding, refine_on_tape, RefineConfig, RefineNetParams};

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalMap {
    pub c: DMatrix<f64>,
}

impl FunctionalMap {
    pub fn identity(k: usize) -> Self {
        FunctionalMap {
            c: DMatrix::identity(k, k),
        }
    }

    pub fn k(&self) -> usize {
        self.c.nrows()
    }

    /// `Σ_{i≠j} c_ij² / Σ c_ij²`.
    pub fn off_diagonal_energy_ratio(&self) -> f64 {
        let total = self.c.norm_squared();
        if total == 0.0 {
            return 0.0;
        }
        let diag: f64 = self.c.diagonal().iter().map(|v| v * v).sum();
        (total - diag) / total
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentBasis {
    /// `k × r`.
    pub z: DMatrix<f64>,
}

impl LatentBasis {
    /// The first `r` columns of `I_k`.
    pub fn initial(k: usize, r: usize) -> Self {
        LatentBasis {
            z: DMatrix::identity(k, r),
        }
    }

    /// `‖ZᵗZ − I_r‖_F`.
    pub fn orthonormality_gap(&self) -> f64 {
        let r = self.z.ncols();
        (self.z.transpose() * &self.z - DMatrix::<f64>::identity(r, r)).norm()
    }
}

/// Descriptor coefficients `F̃ = Φᵗ F` (`k × d`).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDescriptors {
    pub coeffs: DMatrix<f64>,
}

pub fn project_descriptors(basis: &SpectralBasis, refined: &DMatrix<f64>) -> Result<SpectralDescriptors> {
    if refined.nrows() != basis.nodes() {
        return Err(FmapError::Shape(format!(
            "descriptors have {} rows, basis has {} nodes",
            refined.nrows(),
            basis.nodes()
        )));
    }
    Ok(SpectralDescriptors {
        coeffs: basis.vectors.transpose() * refined,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lambda_diag: f64,
    pub lambda_cons: f64,
    pub lambda_z: f64,
    pub lambda_reg: f64,
    pub iterations: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Width `r` of the latent bases; clamped to `k`.
    pub latent_r: usize,
    /// `None` optimizes directly on the raw descriptors.
    pub refine: Option<RefineConfig>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lambda_diag: 5.0,
            lambda_cons: 1e-3,
            lambda_z: 1.0,
            lambda_reg: 1.0,
            iterations: 600,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            latent_r: 20,
            refine: Some(RefineConfig::default()),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_diag, self.lambda_cons, self.lambda_z, self.lambda_reg];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(FmapError::Argument("loss weights must be finite and non-negative".into()));
        }
        if self.iterations == 0 {
            return Err(FmapError::Argument("at least one iteration is required".into()));
        }
        if !(self.lr > 0.0) {
            return Err(FmapError::Argument("learning rate must be positive".into()));
        }
        if self.latent_r == 0 {
            return Err(FmapError::Argument("latent width r must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Individual loss terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub feat: f64,
    pub diag: f64,
    pub cons: f64,
    /// `tr(ZᴹᵗWZᴹ) + tr(ZᴺᵗWZᴺ)`.
    pub trace: f64,
    /// `‖ZᴹᵗZᴹ − I‖ + ‖ZᴺᵗZᴺ − I‖`.
    pub orth: f64,
    pub total: f64,
}

/// `|λᴺ_i − λᴹ_j|`, row `i` over the target spectrum, column `j` over the source.
pub fn spectral_gaps(lambda_m: &[f64], lambda_n: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(lambda_n.len(), lambda_m.len(), |i, j| (lambda_n[i] - lambda_m[j]).abs())
}

pub mod terms {
    //! Loss terms recorded on a [`Tape`].

    use super::*;

    pub fn feat(t: &mut Tape, c: Var, fm: Var, fn_: Var) -> Var {
        let mapped = t.matmul(c, fm);
        let diff = t.sub(mapped, fn_);
        t.frobenius(diff)
    }

    /// `gaps` is a leaf holding [`spectral_gaps`].
    pub fn diag(t: &mut Tape, c: Var, gaps: Var) -> Var {
        let weighted = t.hadamard(gaps, c);
        t.sq_frobenius(weighted)
    }

    pub fn cons(t: &mut Tape, c: Var, zm: Var, zn: Var) -> Var {
        let mapped = t.matmul(c, zm);
        let diff = t.sub(mapped, zn);
        t.frobenius(diff)
    }

    /// `tr(ZᵗWZ)` with `W = I + CᵗC`; `w` is the recorded `W`.
    pub fn latent_trace(t: &mut Tape, w: Var, z: Var) -> Var {
        let wz = t.matmul(w, z);
        let zt = t.transpose(z);
        let q = t.matmul(zt, wz);
        t.trace(q)
    }

    pub fn w_matrix(t: &mut Tape, c: Var, identity_k: Var) -> Var {
        let ct = t.transpose(c);
        let ctc = t.matmul(ct, c);
        t.add(identity_k, ctc)
    }

    /// `identity_r` is a leaf holding `I_r`.
    pub fn orth(t: &mut Tape, z: Var, identity_r: Var) -> Var {
        let zt = t.transpose(z);
        let g = t.matmul(zt, z);
        let d = t.sub(g, identity_r);
        t.frobenius(d)
    }
}

/// Weights of the full objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub diag: f64,
    pub cons: f64,
    pub z: f64,
    pub reg: f64,
}

impl From<&OptimizerConfig> for LossWeights {
    fn from(c: &OptimizerConfig) -> Self {
        LossWeights {
            diag: c.lambda_diag,
            cons: c.lambda_cons,
            z: c.lambda_z,
            reg: c.lambda_reg,
        }
    }
}

/// Tape nodes of each loss term after [`record_total_loss`].
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub feat: Var,
    pub diag: Var,
    pub cons: Var,
    pub trace: Var,
    pub orth: Var,
    pub total: Var,
}

impl LossNodes {
    pub fn values(&self, t: &Tape) -> LossTerms {
        LossTerms {
            feat: t.scalar(self.feat),
            diag: t.scalar(self.diag),
            cons: t.scalar(self.cons),
            trace: t.scalar(self.trace),
            orth: t.scalar(self.orth),
            total: t.scalar(self.total),
        }
    }
}

/// Records the full objective
/// `L_feat + λ_diag L_diag + λ_cons L_cons + λ_Z (tr ZᴹᵗWZᴹ + tr ZᴺᵗWZᴺ) + λ_reg (‖ZᴹᵗZᴹ−I‖ + ‖ZᴺᵗZᴺ−I‖)`.
#[allow(clippy::too_many_arguments)]
pub fn record_total_loss(
    t: &mut Tape,
    c: Var,
    zm: Var,
    zn: Var,
    fm: Var,
    fn_: Var,
    lambda_m: &[f64],
    lambda_n: &[f64],
    weights: LossWeights,
) -> LossNodes {
    let k = t.value(c).nrows();
    let r = t.value(zm).ncols();
    let gaps = t.leaf(spectral_gaps(lambda_m, lambda_n));
    let id_k = t.leaf(DMatrix::identity(k, k));
    let id_r = t.leaf(DMatrix::identity(r, r));

    let feat = terms::feat(t, c, fm, fn_);
    let diag = terms::diag(t, c, gaps);
    let cons = terms::cons(t, c, zm, zn);
    let w = terms::w_matrix(t, c, id_k);
    let tr_m = terms::latent_trace(t, w, zm);
    let tr_n = terms::latent_trace(t, w, zn);
    let trace = t.add(tr_m, tr_n);
    let o_m = terms::orth(t, zm, id_r);
    let o_n = terms::orth(t, zn, id_r);
    let orth = t.add(o_m, o_n);

    let total = {
        let a = t.scale(diag, weights.diag);
        let b = t.scale(cons, weights.cons);
        let cz = t.scale(trace, weights.z);
        let d = t.scale(orth, weights.reg);
        let s = t.add(feat, a);
        let s = t.add(s, b);
        let s = t.add(s, cz);
        t.add(s, d)
    };
    LossNodes {
        feat,
        diag,
        cons,
        trace,
        orth,
        total,
    }
}

fn eval_scalar(f: impl FnOnce(&mut Tape) -> Var) -> f64 {
    let mut t = Tape::new();
    let v = f(&mut t);
    t.scalar(v)
}

fn check_shapes(c: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if c.ncols() != a.nrows() || c.nrows() != b.nrows() || a.ncols() != b.ncols() {
        return Err(FmapError::Shape(format!(
            "C {:?} cannot map {:?} onto {:?}",
            c.shape(),
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `‖C F̃ᴹ − F̃ᴺ‖`.
pub fn loss_feat(c: &DMatrix<f64>, fm: &SpectralDescriptors, fn_: &SpectralDescriptors) -> Result<f64> {
    check_shapes(c, &fm.coeffs, &fn_.coeffs)?;
    Ok(eval_scalar(|t| {
        let (cv, a, b) = (t.leaf(c.clone()), t.leaf(fm.coeffs.clone()), t.leaf(fn_.coeffs.clone()));
        terms::feat(t, cv, a, b)
    }))
}

/// `Σ_ij (|λᴺ_i − λᴹ_j| c_ij)²`.
pub fn loss_diag(c: &DMatrix<f64>, lambda_m: &[f64], lambda_n: &[f64]) -> Result<f64> {
    if c.shape() != (lambda_n.len(), lambda_m.len()) {
        return Err(FmapError::Shape(format!(
            "C {:?} does not match spectra of lengths {} (target) and {} (source)",
            c.shape(),
            lambda_n.len(),
            lambda_m.len()
        )));
    }
    Ok(eval_scalar(|t| {
        let cv = t.leaf(c.clone());
        let g = t.leaf(spectral_gaps(lambda_m, lambda_n));
        terms::diag(t, cv, g)
    }))
}

/// `‖C Zᴹ − Zᴺ‖`.
pub fn loss_cons(c: &DMatrix<f64>, zm: &LatentBasis, zn: &LatentBasis) -> Result<f64> {
    check_shapes(c, &zm.z, &zn.z)?;
    Ok(eval_scalar(|t| {
        let (cv, a, b) = (t.leaf(c.clone()), t.leaf(zm.z.clone()), t.leaf(zn.z.clone()));
        terms::cons(t, cv, a, b)
    }))
}

/// `tr(ZᴹᵗWZᴹ) + tr(ZᴺᵗWZᴺ)` with `W = I + CᵗC`.
pub fn loss_latent_trace(c: &DMatrix<f64>, zm: &LatentBasis, zn: &LatentBasis) -> Result<f64> {
    check_shapes(c, &zm.z, &zn.z)?;
    Ok(eval_scalar(|t| {
        let k = c.nrows();
        let (cv, a, b) = (t.leaf(c.clone()), t.leaf(zm.z.clone()), t.leaf(zn.z.clone()));
        let id = t.leaf(DMatrix::identity(k, k));
        let w = terms::w_matrix(t, cv, id);
        let ta = terms::latent_trace(t, w, a);
        let tb = terms::latent_trace(t, w, b);
        t.add(ta, tb)
    }))
}

/// `‖ZᵗZ − I_r‖`.
pub fn loss_orth(z: &LatentBasis) -> f64 {
    eval_scalar(|t| {
        let r = z.z.ncols();
        let zv = t.leaf(z.z.clone());
        let id = t.leaf(DMatrix::identity(r, r));
        terms::orth(t, zv, id)
    })
}

#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    c: &DMatrix<f64>,
    zm: &LatentBasis,
    zn: &LatentBasis,
    fm: &SpectralDescriptors,
    fn_: &SpectralDescriptors,
    lambda_m: &[f64],
    lambda_n: &[f64],
    config: &OptimizerConfig,
) -> Result<LossTerms> {
    check_shapes(c, &fm.coeffs, &fn_.coeffs)?;
    check_shapes(c, &zm.z, &zn.z)?;
    if c.shape() != (lambda_n.len(), lambda_m.len()) {
        return Err(FmapError::Shape("spectra do not match C".into()));
    }
    let mut t = Tape::new();
    let cv = t.leaf(c.clone());
    let a = t.leaf(zm.z.clone());
    let b = t.leaf(zn.z.clone());
    let f = t.leaf(fm.coeffs.clone());
    let g = t.leaf(fn_.coeffs.clone());
    let nodes = record_total_loss(&mut t, cv, a, b, f, g, lambda_m, lambda_n, config.into());
    Ok(nodes.values(&t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub config: OptimizerConfig,
    pub k: usize,
    pub latent_r: usize,
    pub refine_parameters: usize,
    pub iterations_run: usize,
    /// Total loss before each update.
    pub loss_trace: Vec<f64>,
    /// Terms at the returned parameters.
    pub final_terms: LossTerms,
    pub latent_orthonormality_gap_m: f64,
    pub latent_orthonormality_gap_n: f64,
    pub off_diagonal_energy_ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl OptimizationReport {
    /// A report for a run that has not taken any step yet.
    pub fn empty(config: &OptimizerConfig, k: usize) -> Self {
        OptimizationReport {
            config: config.clone(),
            k,
            latent_r: config.latent_r.min(k),
            refine_parameters: 0,
            iterations_run: 0,
            loss_trace: Vec::new(),
            final_terms: LossTerms::default(),
            latent_orthonormality_gap_m: 0.0,
            latent_orthonormality_gap_n: 0.0,
            off_diagonal_energy_ratio: 0.0,
            failure: None,
        }
    }
}

/// The objective for one pair with everything but the optimized parameters
/// fixed. Parameters are ordered `[C, Zᴹ, Zᴺ, refinement tensors…]`.
pub struct PairObjective<'a> {
    basis_m: &'a SpectralBasis,
    basis_n: &'a SpectralBasis,
    /// Raw node features (`n × d`) when refining, projected coefficients otherwise.
    feats_m: DMatrix<f64>,
    feats_n: DMatrix<f64>,
    refine: Option<RefineSetup>,
    weights: LossWeights,
    latent_r: usize,
    seed: u64,
}

struct RefineSetup {
    config: RefineConfig,
    d_feat: usize,
    pos_m: DMatrix<f64>,
    pos_n: DMatrix<f64>,
}

impl<'a> PairObjective<'a> {
    pub fn new(
        basis_m: &'a SpectralBasis,
        basis_n: &'a SpectralBasis,
        desc_m: &FeatureGrid,
        desc_n: &FeatureGrid,
        config: &OptimizerConfig,
    ) -> Result<Self> {
        let k = basis_m.k();
        if basis_n.k() != k {
            return Err(FmapError::Argument(format!(
                "bases have different sizes: {} and {}",
                k,
                basis_n.k()
            )));
        }
        for (name, desc, basis) in [("source", desc_m, basis_m), ("target", desc_n, basis_n)] {
            if desc.nodes() != basis.nodes() {
                return Err(FmapError::Shape(format!(
                    "{name} descriptors cover {} nodes but the basis has {}; resize descriptors to the basis grid",
                    desc.nodes(),
                    basis.nodes()
                )));
            }
        }
        if desc_m.dim() != desc_n.dim() {
            return Err(FmapError::Shape(format!(
                "descriptor widths differ: {} and {}",
                desc_m.dim(),
                desc_n.dim()
            )));
        }
        let (feats_m, feats_n, refine) = match config.refine {
            Some(rc) => (
                desc_m.to_matrix(),
                desc_n.to_matrix(),
                Some(RefineSetup {
                    config: rc,
                    d_feat: desc_m.dim(),
                    pos_m: positional_embedding(desc_m.height(), desc_m.width(), rc.d_model)?,
                    pos_n: positional_embedding(desc_n.height(), desc_n.width(), rc.d_model)?,
                }),
            ),
            None => (
                project_descriptors(basis_m, &desc_m.to_matrix())?.coeffs,
                project_descriptors(basis_n, &desc_n.to_matrix())?.coeffs,
                None,
            ),
        };
        Ok(PairObjective {
            basis_m,
            basis_n,
            feats_m,
            feats_n,
            refine,
            weights: config.into(),
            latent_r: config.latent_r.min(k),
            seed: config.seed,
        })
    }

    /// `C = I`, both `Z` the first `r` columns of `I`, seeded network weights.
    pub fn initial_params(&self) -> Result<Vec<DMatrix<f64>>> {
        let k = self.basis_m.k();
        let mut p = vec![
            DMatrix::identity(k, k),
            LatentBasis::initial(k, self.latent_r).z,
            LatentBasis::initial(k, self.latent_r).z,
        ];
        if let Some(r) = &self.refine {
            p.extend(RefineNetParams::init(r.d_feat, r.config, self.seed)?.tensors);
        }
        Ok(p)
    }

    pub fn record(&self, t: &mut Tape, params: &[Var]) -> LossNodes {
        let (c, zm, zn) = (params[0], params[1], params[2]);
        let (fm, fn_) = match &self.refine {
            Some(r) => {
                let a = t.leaf(self.feats_m.clone());
                let pa = t.leaf(r.pos_m.clone());
                let b = t.leaf(self.feats_n.clone());
                let pb = t.leaf(r.pos_n.clone());
                let (xm, xn) = refine_on_tape(t, &r.config, &params[3..], a, pa, b, pb);
                let phi_m = t.leaf(self.basis_m.vectors.transpose());
                let phi_n = t.leaf(self.basis_n.vectors.transpose());
                (t.matmul(phi_m, xm), t.matmul(phi_n, xn))
            }
            None => (t.leaf(self.feats_m.clone()), t.leaf(self.feats_n.clone())),
        };
        record_total_loss(
            t,
            c,
            zm,
            zn,
            fm,
            fn_,
            &self.basis_m.eigenvalues,
            &self.basis_n.eigenvalues,
            self.weights,
        )
    }

    /// Loss terms at concrete parameter values.
    pub fn evaluate(&self, params: &[DMatrix<f64>]) -> LossTerms {
        let mut t = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| t.leaf(p.clone())).collect();
        self.record(&mut t, &vars).values(&t)
    }
}

pub fn optimize_pair(
    basis_m: &SpectralBasis,
    basis_n: &SpectralBasis,
    desc_m: &FeatureGrid,
    desc_n: &FeatureGrid,
    config: &OptimizerConfig,
) -> Result<(FunctionalMap, OptimizationReport)> {
    let (result, report) = optimize_pair_with_report(basis_m, basis_n, desc_m, desc_n, config);
    result.map(|c| (c, report))
}

/// Like [`optimize_pair`] but always hands back the report, including the
/// partial loss trace when the run aborts.
pub fn optimize_pair_with_report(
    basis_m: &SpectralBasis,
    basis_n: &SpectralBasis,
    desc_m: &FeatureGrid,
    desc_n: &FeatureGrid,
    config: &OptimizerConfig,
) -> (Result<FunctionalMap>, OptimizationReport) {
    let mut report = OptimizationReport::empty(config, basis_m.k());
    let result = run(basis_m, basis_n, desc_m, desc_n, config, &mut report);
    if let Err(e) = &result {
        report.failure = Some(e.to_string());
    }
    (result, report)
}

fn run(
    basis_m: &SpectralBasis,
    basis_n: &SpectralBasis,
    desc_m: &FeatureGrid,
    desc_n: &FeatureGrid,
    config: &OptimizerConfig,
    report: &mut OptimizationReport,
) -> Result<FunctionalMap> {
    config.validate()?;
    let objective = PairObjective::new(basis_m, basis_n, desc_m, desc_n, config)?;
    let mut params = objective.initial_params()?;
    report.refine_parameters = params[3..].iter().map(|p| p.len()).sum();
    let mut adam = AdamState::new(config.adam(), &params);

    for it in 0..config.iterations {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let nodes = objective.record(&mut tape, &vars);
        let loss = tape.scalar(nodes.total);
        if !loss.is_finite() {
            return Err(FmapError::Numeric(format!("loss became non-finite at iteration {it}")));
        }
        report.loss_trace.push(loss);
        let grads = tape.backward(nodes.total)?;
        let g: Vec<DMatrix<f64>> = vars.iter().map(|v| grads.wrt(*v)).collect();
        adam.step(&mut params, &g)?;
        report.iterations_run = it + 1;
    }

    report.final_terms = objective.evaluate(&params);
    if !report.final_terms.total.is_finite() {
        return Err(FmapError::Numeric(format!(
            "loss became non-finite at iteration {}",
            config.iterations
        )));
    }
    let fmap = FunctionalMap { c: params[0].clone() };
    report.latent_orthonormality_gap_m = LatentBasis { z: params[1].clone() }.orthonormality_gap();
    report.latent_orthonormality_gap_n = LatentBasis { z: params[2].clone() }.orthonormality_gap();
    report.off_diagonal_energy_ratio = fmap.off_diagonal_energy_ratio();
    Ok(fmap)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad_engine::grad_check;
    use approx::assert_relative_eq;

    fn coeffs(r: usize, c: usize, v: &[f64]) -> SpectralDescriptors {
        SpectralDescriptors {
            coeffs: DMatrix::from_row_slice(r, c, v),
        }
    }

    #[test]
    fn feat_loss_examples() {
        let fm = coeffs(2, 1, &[1.0, 0.0]);
        let fnn = coeffs(2, 1, &[0.0, 1.0]);
        assert_relative_eq!(loss_feat(&DMatrix::identity(2, 2), &fm, &fnn).unwrap(), 2f64.sqrt());
        assert_eq!(loss_feat(&DMatrix::identity(2, 2), &fm, &fm).unwrap(), 0.0);
        let target = coeffs(2, 2, &[1.0, 2.0, 2.0, 0.0]);
        assert_relative_eq!(loss_feat(&DMatrix::zeros(2, 2), &coeffs(2, 2, &[1.0; 4]), &target).unwrap(), 3.0);
        assert!(loss_feat(&DMatrix::zeros(3, 3), &fm, &fnn).is_err());
    }

    #[test]
    fn diag_loss_examples() {
        let l = [0.0, 0.4, 1.3];
        assert_eq!(loss_diag(&DMatrix::identity(3, 3), &l, &l).unwrap(), 0.0);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&[2.0, -1.0, 7.0]));
        assert_eq!(loss_diag(&d, &l, &l).unwrap(), 0.0);
        // λᴹ = (0, 1), λᴺ = (0, 2), C = 𝟙𝟙ᵗ: gaps |0−0|, |0−1|, |2−0|, |2−1|.
        let v = loss_diag(&DMatrix::from_element(2, 2, 1.0), &[0.0, 1.0], &[0.0, 2.0]).unwrap();
        assert_relative_eq!(v, 0.0 + 1.0 + 4.0 + 1.0);
    }

    #[test]
    fn diag_orientation_follows_target_rows() {
        // Only c_10 is non-zero: row 1 is target eigenvalue 2, column 0 source eigenvalue 0.
        let mut c = DMatrix::zeros(2, 2);
        c[(1, 0)] = 1.0;
        assert_relative_eq!(loss_diag(&c, &[0.0, 1.0], &[0.0, 2.0]).unwrap(), 4.0);
        let mut c = DMatrix::zeros(2, 2);
        c[(0, 1)] = 1.0;
        assert_relative_eq!(loss_diag(&c, &[0.0, 1.0], &[0.0, 2.0]).unwrap(), 1.0);
    }

    #[test]
    fn cons_loss_examples() {
        let e1 = LatentBasis { z: DMatrix::from_row_slice(2, 1, &[1.0, 0.0]) };
        let e2 = LatentBasis { z: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]) };
        let id = DMatrix::identity(2, 2);
        assert_relative_eq!(loss_cons(&id, &e1, &e2).unwrap(), 2f64.sqrt());
        assert_eq!(loss_cons(&id, &e1, &e1).unwrap(), 0.0);
        let c = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(loss_cons(&c, &e1, &e2).unwrap(), 0.0);
    }

    #[test]
    fn latent_trace_examples() {
        let zm = LatentBasis { z: DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.0, 1.0, -1.0, 0.5]) };
        let zn = LatentBasis { z: DMatrix::from_row_slice(3, 2, &[0.5, 0.0, 3.0, 1.0, 0.0, 2.0]) };
        let v = loss_latent_trace(&DMatrix::zeros(3, 3), &zm, &zn).unwrap();
        assert_relative_eq!(v, zm.z.norm_squared() + zn.z.norm_squared(), epsilon = 1e-12);
        let zero = LatentBasis { z: DMatrix::zeros(3, 2) };
        assert_eq!(loss_latent_trace(&DMatrix::identity(3, 3), &zero, &zero).unwrap(), 0.0);
        for r in 1..=3 {
            let z = LatentBasis::initial(5, r);
            assert_relative_eq!(
                loss_latent_trace(&DMatrix::identity(5, 5), &z, &z).unwrap(),
                4.0 * r as f64,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn orth_loss_examples() {
        for r in 1..=4 {
            let z = LatentBasis::initial(6, r);
            assert_eq!(loss_orth(&z), 0.0);
            let zero = LatentBasis { z: DMatrix::zeros(6, r) };
            assert_relative_eq!(loss_orth(&zero), (r as f64).sqrt(), epsilon = 1e-12);
            let doubled = LatentBasis { z: z.z * 2.0 };
            assert_relative_eq!(loss_orth(&doubled), 3.0 * (r as f64).sqrt(), epsilon = 1e-12);
        }
    }

    #[test]
    fn total_loss_weights() {
        let k = 4;
        let fm = coeffs(4, 2, &[1.0, 0.5, -0.2, 0.3, 0.8, -1.0, 0.1, 0.4]);
        let fnn = coeffs(4, 2, &[0.2, 0.1, 0.3, -0.3, 0.5, 0.2, -0.6, 0.9]);
        let lm = [0.0, 0.1, 0.5, 0.9];
        let ln = [0.0, 0.2, 0.4, 1.1];
        let c = DMatrix::from_fn(k, k, |i, j| 0.1 * (i as f64) - 0.05 * (j as f64) + if i == j { 1.0 } else { 0.0 });
        let zm = LatentBasis { z: DMatrix::from_fn(k, 2, |i, j| 0.3 * i as f64 - 0.2 * j as f64) };
        let zn = LatentBasis::initial(k, 2);

        let zero = OptimizerConfig {
            lambda_diag: 0.0,
            lambda_cons: 0.0,
            lambda_z: 0.0,
            lambda_reg: 0.0,
            ..Default::default()
        };
        let t = total_loss(&c, &zm, &zn, &fm, &fnn, &lm, &ln, &zero).unwrap();
        assert_eq!(t.total, loss_feat(&c, &fm, &fnn).unwrap());

        let cfg = OptimizerConfig::default();
        assert_eq!((cfg.lambda_diag, cfg.lambda_cons, cfg.lambda_z, cfg.lambda_reg), (5.0, 1e-3, 1.0, 1.0));
        let t = total_loss(&c, &zm, &zn, &fm, &fnn, &lm, &ln, &cfg).unwrap();
        let expected = loss_feat(&c, &fm, &fnn).unwrap()
            + 5.0 * loss_diag(&c, &lm, &ln).unwrap()
            + 1e-3 * loss_cons(&c, &zm, &zn).unwrap()
            + loss_latent_trace(&c, &zm, &zn).unwrap()
            + loss_orth(&zm)
            + loss_orth(&zn);
        assert_relative_eq!(t.total, expected, epsilon = 1e-12);
    }

    #[test]
    fn perfect_fit_leaves_trace_floor() {
        let (k, r) = (5, 3);
        let f = coeffs(5, 2, &[1.0, 0.0, 0.5, 0.2, -0.3, 0.1, 0.0, 0.7, 0.4, -0.4]);
        let lambda = [0.0, 0.3, 0.6, 1.0, 1.7];
        let z = LatentBasis::initial(k, r);
        let t = total_loss(&DMatrix::identity(k, k), &z, &z, &f, &f, &lambda, &lambda, &OptimizerConfig::default()).unwrap();
        assert_eq!((t.feat, t.diag, t.cons, t.orth), (0.0, 0.0, 0.0, 0.0));
        assert_relative_eq!(t.total, 1.0 * 4.0 * r as f64, epsilon = 1e-12);
    }

    #[test]
    fn total_loss_gradients_match_finite_differences() {
        let (k, r, d) = (8, 4, 3);
        let lm: Vec<f64> = (0..k).map(|i| 0.1 * i as f64).collect();
        let ln: Vec<f64> = (0..k).map(|i| 0.12 * i as f64 + 0.01).collect();
        let mk = |rows, cols, s: f64| DMatrix::from_fn(rows, cols, |i, j| ((i * 7 + j * 3) as f64 * s).sin());
        let params = vec![
            DMatrix::identity(k, k) + mk(k, k, 0.37) * 0.2,
            mk(k, r, 0.91),
            mk(k, r, 1.13),
            mk(k, d, 0.53),
            mk(k, d, 0.71),
        ];
        let weights = LossWeights { diag: 5.0, cons: 1e-3, z: 1.0, reg: 1.0 };
        let err = grad_check(
            |t, p| record_total_loss(t, p[0], p[1], p[2], p[3], p[4], &lm, &ln, weights).total,
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    fn flip(s: &[f64], m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| s[i] * m[(i, j)])
    }

    #[test]
    fn basis_sign_gauge_leaves_objective_unchanged() {
        let k = 5;
        let signs = [1.0, -1.0, 1.0, -1.0, -1.0];
        let mk = |rows, cols, s: f64| DMatrix::from_fn(rows, cols, |i, j| ((i * 5 + j * 2) as f64 * s).cos());
        let c = DMatrix::identity(k, k) + mk(k, k, 0.7) * 0.3;
        let fm = SpectralDescriptors { coeffs: mk(k, 3, 0.41) };
        let fnn = SpectralDescriptors { coeffs: mk(k, 3, 0.93) };
        let zm = LatentBasis { z: mk(k, 2, 1.7) };
        let zn = LatentBasis { z: mk(k, 2, 2.3) };
        let lm = [0.0, 0.2, 0.3, 0.8, 1.1];
        let ln = [0.0, 0.25, 0.35, 0.7, 1.2];
        let cfg = OptimizerConfig::default();
        let base = total_loss(&c, &zm, &zn, &fm, &fnn, &lm, &ln, &cfg).unwrap();

        // Flipping Φᴹ columns only: C ↦ CS, F̃ᴹ ↦ SF̃ᴹ, Zᴹ ↦ SZᴹ.
        let cs = flip(&signs, &c.transpose()).transpose();
        let fm_s = SpectralDescriptors { coeffs: flip(&signs, &fm.coeffs) };
        let zm_s = LatentBasis { z: flip(&signs, &zm.z) };
        let no_trace = OptimizerConfig { lambda_z: 0.0, ..cfg.clone() };
        let a = total_loss(&c, &zm, &zn, &fm, &fnn, &lm, &ln, &no_trace).unwrap();
        let b = total_loss(&cs, &zm_s, &zn, &fm_s, &fnn, &lm, &ln, &no_trace).unwrap();
        assert_relative_eq!(a.total, b.total, epsilon = 1e-12);

        // Flipping both bases alike: C ↦ SCS.
        let scs = flip(&signs, &cs);
        let fn_s = SpectralDescriptors { coeffs: flip(&signs, &fnn.coeffs) };
        let zn_s = LatentBasis { z: flip(&signs, &zn.z) };
        let both = total_loss(&scs, &zm_s, &zn_s, &fm_s, &fn_s, &lm, &ln, &cfg).unwrap();
        assert_relative_eq!(base.total, both.total, epsilon = 1e-12);
        assert_relative_eq!(base.trace, both.trace, epsilon = 1e-12);
    }

    #[test]
    fn span_reconstruction() {
        use crate::eigensolver::dense_reference_eig;
        use crate::laplacian::{build_laplacian, WeightedGridGraph};
        let basis = dense_reference_eig(&build_laplacian(&WeightedGridGraph::uniform(5, 5)), 8).unwrap();
        let a = DMatrix::from_fn(8, 2, |i, j| ((i + 3 * j) as f64).sin());
        let f = &basis.vectors * &a;
        let p = project_descriptors(&basis, &f).unwrap();
        assert!((&basis.vectors * p.coeffs - f).amax() < 1e-10);
    }

    fn small_pair(h: usize, w: usize, k: usize, d: usize) -> (SpectralBasis, SpectralBasis, FeatureGrid, FeatureGrid) {
        use crate::eigensolver::dense_reference_eig;
        use crate::laplacian::grid_laplacian;
        let grid = |s: f64| {
            FeatureGrid::new(h, w, d, (0..h * w * d).map(|i| ((i as f64 * s).sin() + 1.5) as f32).collect()).unwrap()
        };
        let (gm, gn) = (grid(0.37), grid(0.53));
        let basis = |g: &FeatureGrid| {
            let (l, _) = grid_laplacian(g, Default::default()).unwrap();
            dense_reference_eig(&l, k).unwrap().with_grid(h, w).unwrap()
        };
        (basis(&gm), basis(&gn), gm, gn)
    }

    #[test]
    fn full_composition_gradients() {
        let (bm, bn, gm, gn) = small_pair(7, 7, 8, 5);
        let config = OptimizerConfig {
            latent_r: 4,
            refine: Some(RefineConfig { d_model: 16, hidden: 24, blocks: 1 }),
            ..Default::default()
        };
        let obj = PairObjective::new(&bm, &bn, &gm, &gn, &config).unwrap();
        let mut params = obj.initial_params().unwrap();
        // Move off the symmetric starting point so every term is active.
        for (i, p) in params.iter_mut().enumerate().take(3) {
            *p += DMatrix::from_fn(p.nrows(), p.ncols(), |r, c| 0.1 * ((r * 3 + c + i) as f64).sin());
        }
        let err = grad_check(|t, v| obj.record(t, v).total, &params, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn optimization_is_deterministic_and_decreasing() {
        let (bm, bn, gm, gn) = small_pair(6, 6, 8, 4);
        let config = OptimizerConfig {
            iterations: 60,
            latent_r: 4,
            refine: Some(RefineConfig { d_model: 8, hidden: 8, blocks: 1 }),
            ..Default::default()
        };
        let (c1, r1) = optimize_pair(&bm, &bn, &gm, &gn, &config).unwrap();
        let (c2, r2) = optimize_pair(&bm, &bn, &gm, &gn, &config).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(r1, r2);
        assert_eq!(r1.loss_trace.len(), 60);
        assert!(r1.final_terms.total < r1.loss_trace[0]);
        assert!(r1.refine_parameters > 0);
    }

    #[test]
    fn optimizer_rejects_mismatched_inputs() {
        let (bm, bn, gm, gn) = small_pair(5, 5, 6, 3);
        let cfg = OptimizerConfig { refine: None, iterations: 2, ..Default::default() };
        let short = bn.truncated(5);
        let (res, report) = optimize_pair_with_report(&bm, &short, &gm, &gn, &cfg);
        assert!(matches!(res, Err(FmapError::Argument(_))));
        assert!(report.failure.is_some());
        let small = FeatureGrid::new(4, 4, 3, vec![1.0; 48]).unwrap();
        assert!(matches!(optimize_pair(&bm, &bn, &small, &gn, &cfg), Err(FmapError::Shape(_))));
        let bad = OptimizerConfig { iterations: 0, ..cfg };
        assert!(optimize_pair(&bm, &bn, &gm, &gn, &bad).is_err());
    }

    #[test]
    fn projection_examples() {
        use crate::eigensolver::dense_reference_eig;
        use crate::laplacian::{build_laplacian, WeightedGridGraph};
        let l = build_laplacian(&WeightedGridGraph::uniform(4, 5));
        let basis = dense_reference_eig(&l, 6).unwrap();
        let n = 20;
        let col = basis.vectors.column(3).into_owned();
        let p = project_descriptors(&basis, &DMatrix::from_column_slice(n, 1, col.as_slice())).unwrap();
        for i in 0..6 {
            assert_relative_eq!(p.coeffs[(i, 0)], if i == 3 { 1.0 } else { 0.0 }, epsilon = 1e-12);
        }
        let p = project_descriptors(&basis, &DMatrix::from_element(n, 1, 2.0)).unwrap();
        assert_relative_eq!(p.coeffs[(0, 0)], 2.0 * (n as f64).sqrt(), epsilon = 1e-12);
        for i in 1..6 {
            assert!(p.coeffs[(i, 0)].abs() < 1e-12);
        }
        assert!(project_descriptors(&basis, &DMatrix::zeros(19, 1)).is_err());
    }
}
