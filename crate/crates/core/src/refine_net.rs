//! Cross-image feature refinement by attention over the complete bipartite
//! graph between the pixels of two images.
//!
//! Node states start as a learned projection of the raw features plus a fixed
//! sinusoidal position code. Each block lets every node of one image attend to
//! all nodes of the other image and adds `MLP([x ‖ message])` to its state.
//! Both directions share one set of weights.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FmapError, Result};
use crate::grad_engine::{attention_forward, Tape, Var};
use crate::interchange::FeatureGrid;
use crate::par::Execution;

const NORM_EPS: f64 = 1e-5;
const PER_BLOCK: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub d_model: usize,
    pub hidden: usize,
    pub blocks: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            d_model: 128,
            hidden: 256,
            blocks: 1,
        }
    }
}

/// Fixed 2D sinusoidal code: channels `[0, d/4)` are `sin(x·ωᵢ)`, then
/// `cos(x·ωᵢ)`, `sin(y·ωᵢ)`, `cos(y·ωᵢ)`, with `ωᵢ = 10000^(−i/(d/4))`.
/// Rows follow row-major node order.
pub fn positional_embedding(h: usize, w: usize, d_model: usize) -> Result<DMatrix<f64>> {
    if d_model == 0 || !d_model.is_multiple_of(4) {
        return Err(FmapError::Argument(format!(
            "positional embedding width must be a positive multiple of 4, got {d_model}"
        )));
    }
    let quarter = d_model / 4;
    let freqs: Vec<f64> = (0..quarter)
        .map(|i| 10000f64.powf(-(i as f64) / quarter as f64))
        .collect();
    Ok(DMatrix::from_fn(h * w, d_model, |node, c| {
        let (x, y) = ((node % w) as f64, (node / w) as f64);
        let (block, i) = (c / quarter, c % quarter);
        match block {
            0 => (x * freqs[i]).sin(),
            1 => (x * freqs[i]).cos(),
            2 => (y * freqs[i]).sin(),
            _ => (y * freqs[i]).cos(),
        }
    }))
}

/// `mᵢ = Σⱼ softmax_j(qᵢ·kⱼ / √d) vⱼ` over all key nodes.
pub fn cross_attention(q: &DMatrix<f64>, k: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if q.ncols() != k.ncols() || k.nrows() != v.nrows() {
        return Err(FmapError::Shape(format!(
            "attention shapes disagree: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    Ok(attention_forward(q, k, v, scale, Execution::default()))
}

/// Weights of the refinement network, stored as a flat tensor list:
/// `[w_in, b_in]` followed by `[w_q, w_k, w_v, w_1, b_1, γ, β, w_2, b_2]` per block.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineNetParams {
    pub config: RefineConfig,
    pub d_feat: usize,
    pub tensors: Vec<DMatrix<f64>>,
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> DMatrix<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    DMatrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound))
}

impl RefineNetParams {
    /// Seeded Xavier-uniform weights, zero biases, unit norm gains.
    pub fn init(d_feat: usize, config: RefineConfig, seed: u64) -> Result<Self> {
        if config.d_model == 0 || !config.d_model.is_multiple_of(4) {
            return Err(FmapError::Argument(format!(
                "d_model must be a positive multiple of 4, got {}",
                config.d_model
            )));
        }
        if d_feat == 0 || config.hidden == 0 {
            return Err(FmapError::Argument("feature and hidden widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h) = (config.d_model, config.hidden);
        let mut tensors = vec![xavier(&mut rng, d_feat, d), DMatrix::zeros(1, d)];
        for _ in 0..config.blocks {
            tensors.push(xavier(&mut rng, d, d));
            tensors.push(xavier(&mut rng, d, d));
            tensors.push(xavier(&mut rng, d, d));
            tensors.push(xavier(&mut rng, 2 * d, h));
            tensors.push(DMatrix::zeros(1, h));
            tensors.push(DMatrix::from_element(1, h, 1.0));
            tensors.push(DMatrix::zeros(1, h));
            tensors.push(xavier(&mut rng, h, d));
            tensors.push(DMatrix::zeros(1, d));
        }
        Ok(RefineNetParams {
            config,
            d_feat,
            tensors,
        })
    }

    pub fn tensor_count(config: &RefineConfig) -> usize {
        2 + PER_BLOCK * config.blocks
    }

    /// Zero the value projections and the MLP output layer, turning every
    /// block into an identity map.
    pub fn zero_residuals(&mut self) {
        for b in 0..self.config.blocks {
            let base = 2 + PER_BLOCK * b;
            for off in [2, 7, 8] {
                self.tensors[base + off].fill(0.0);
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

/// Records one refinement pass on `tape`.
///
/// `params` are the tape leaves of [`RefineNetParams::tensors`]; `feats_*` are
/// `n × d_feat` node features and `pos_*` the matching `n × d_model`
/// position codes. Returns the refined `n × d_model` states for both images.
pub fn refine_on_tape(
    tape: &mut Tape,
    config: &RefineConfig,
    params: &[Var],
    feats_m: Var,
    pos_m: Var,
    feats_n: Var,
    pos_n: Var,
) -> (Var, Var) {
    assert_eq!(params.len(), RefineNetParams::tensor_count(config));
    let scale = 1.0 / (config.d_model as f64).sqrt();
    let (w_in, b_in) = (params[0], params[1]);
    let embed = |tape: &mut Tape, f: Var, pos: Var| {
        let p = tape.matmul(f, w_in);
        let p = tape.add_row(p, b_in);
        tape.add(p, pos)
    };
    let mut xm = embed(tape, feats_m, pos_m);
    let mut xn = embed(tape, feats_n, pos_n);

    for b in 0..config.blocks {
        let w = &params[2 + PER_BLOCK * b..2 + PER_BLOCK * (b + 1)];
        let (wq, wk, wv, w1, b1, gamma, beta, w2, b2) =
            (w[0], w[1], w[2], w[3], w[4], w[5], w[6], w[7], w[8]);
        let update = |tape: &mut Tape, x: Var, other: Var| {
            let q = tape.matmul(x, wq);
            let k = tape.matmul(other, wk);
            let v = tape.matmul(other, wv);
            let msg = tape.attention(q, k, v, scale);
            let cat = tape.concat_cols(x, msg);
            let h = tape.matmul(cat, w1);
            let h = tape.add_row(h, b1);
            let h = tape.instance_norm(h, NORM_EPS);
            let h = tape.mul_row(h, gamma);
            let h = tape.add_row(h, beta);
            let h = tape.relu(h);
            let out = tape.matmul(h, w2);
            let out = tape.add_row(out, b2);
            tape.add(x, out)
        };
        let next_m = update(tape, xm, xn);
        let next_n = update(tape, xn, xm);
        xm = next_m;
        xn = next_n;
    }
    (xm, xn)
}

/// Refine node features given explicit position codes.
pub fn refine_nodes(
    feats_m: &DMatrix<f64>,
    pos_m: &DMatrix<f64>,
    feats_n: &DMatrix<f64>,
    pos_n: &DMatrix<f64>,
    params: &RefineNetParams,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    for (f, p) in [(feats_m, pos_m), (feats_n, pos_n)] {
        if f.ncols() != params.d_feat || p.ncols() != params.config.d_model || f.nrows() != p.nrows() {
            return Err(FmapError::Shape(format!(
                "features {:?} / positions {:?} do not fit d_feat = {}, d_model = {}",
                f.shape(),
                p.shape(),
                params.d_feat,
                params.config.d_model
            )));
        }
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
    let fm = tape.leaf(feats_m.clone());
    let pm = tape.leaf(pos_m.clone());
    let fnn = tape.leaf(feats_n.clone());
    let pn = tape.leaf(pos_n.clone());
    let (xm, xn) = refine_on_tape(&mut tape, &params.config, &vars, fm, pm, fnn, pn);
    let (xm, xn) = (tape.value(xm).clone(), tape.value(xn).clone());
    for (name, x) in [("source", &xm), ("target", &xn)] {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FmapError::Numeric(format!(
                "refinement produced non-finite {name} states after block {}",
                params.config.blocks
            )));
        }
    }
    Ok((xm, xn))
}

/// `g_R(F_M), g_R(F_N)` for two feature grids.
pub fn refine(fm: &FeatureGrid, fn_: &FeatureGrid, params: &RefineNetParams) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = params.config.d_model;
    let pos_m = positional_embedding(fm.height(), fm.width(), d)?;
    let pos_n = positional_embedding(fn_.height(), fn_.width(), d)?;
    refine_nodes(&fm.to_matrix(), &pos_m, &fn_.to_matrix(), &pos_n, params)
}
