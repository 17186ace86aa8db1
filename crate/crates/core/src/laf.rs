//! Locality-aware fusion: multi-head cross-attention from a query modality
//! `X` into a key/value modality `Y` with thresholded sigmoid gates,
//! ε-regularized weighted aggregation, a residual link and pooling.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{concat, AdError, Array, Linear, ParamStore, ReduceMode, Tape, Var};

#[derive(Debug, Error)]
pub enum LafError {
    #[error("invalid LAF config: {0}")]
    Config(String),
    #[error("token width {got} does not match D = {expected}")]
    Width { expected: usize, got: usize },
    #[error(transparent)]
    Ad(#[from] AdError),
}

pub type Result<T> = std::result::Result<T, LafError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    ThresholdedSigmoid,
    Softmax,
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ThresholdedSigmoid => "thresholded_sigmoid",
            Self::Softmax => "softmax",
        })
    }
}

impl FromStr for AttentionMode {
    type Err = LafError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "thresholded_sigmoid" => Ok(Self::ThresholdedSigmoid),
            "softmax" => Ok(Self::Softmax),
            _ => Err(LafError::Config(format!("unknown attention mode {s:?}"))),
        }
    }
}

/// Pooling over query tokens: `Max` for view queries, `MaxConcatMean` for
/// point queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Max,
    MaxConcatMean,
}

impl PoolMode {
    pub fn output_width(self, d: usize) -> usize {
        match self {
            Self::Max => d,
            Self::MaxConcatMean => 2 * d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LafConfig {
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub beta: f64,
    pub eps: f64,
    pub attention_mode: AttentionMode,
    pub pool_mode: PoolMode,
}

impl LafConfig {
    /// `D_H = D / H`, default `ε = 1e-5`.
    pub fn new(d_model: usize, heads: usize, beta: f64, pool_mode: PoolMode) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(LafError::Config(format!("D = {d_model} is not divisible by H = {heads}")));
        }
        let cfg = Self {
            d_model,
            heads,
            head_dim: d_model / heads,
            beta,
            eps: 1e-5,
            attention_mode: AttentionMode::ThresholdedSigmoid,
            pool_mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 || self.d_model != self.heads * self.head_dim {
            return Err(LafError::Config(format!(
                "D = {} must equal H·D_H = {}·{}",
                self.d_model, self.heads, self.head_dim
            )));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(LafError::Config(format!("beta = {} must be in [0, 1)", self.beta)));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(LafError::Config(format!("eps = {} must be positive", self.eps)));
        }
        Ok(())
    }
}

/// Gate scores of one head, `N_X × N_Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMatrix {
    pub alpha: Array,
    /// `true` where `alpha > 0`.
    pub mask: Vec<bool>,
}

impl GateMatrix {
    pub fn from_alpha(alpha: Array) -> Self {
        let mask = alpha.data().iter().map(|&a| a > 0.0).collect();
        Self { alpha, mask }
    }

    pub fn retained(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn rows(&self) -> usize {
        self.alpha.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.alpha.shape()[1]
    }
}

/// Weights of one LAF block.
#[derive(Debug, Clone, Copy)]
pub struct LafWeights {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl LafWeights {
    /// Registers `{prefix}.{q_proj,k_proj,v_proj,out_proj,fc1,fc2}.*`.
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, seed: u64) -> Result<Self> {
        let mut lin = |n: &str| Linear::new(store, &format!("{prefix}.{n}"), d, d, seed);
        Ok(Self {
            q_proj: lin("q_proj")?,
            k_proj: lin("k_proj")?,
            v_proj: lin("v_proj")?,
            out_proj: lin("out_proj")?,
            fc1: lin("fc1")?,
            fc2: lin("fc2")?,
        })
    }

    pub fn linears(&self) -> [Linear; 6] {
        [self.q_proj, self.k_proj, self.v_proj, self.out_proj, self.fc1, self.fc2]
    }
}

/// Full-width projections and their per-head column slices.
pub struct Projections<'t> {
    pub q: Var<'t>,
    pub k: Var<'t>,
    pub v: Var<'t>,
    pub heads: Vec<(Var<'t>, Var<'t>, Var<'t>)>,
}

fn check_width(v: &Var<'_>, d: usize) -> Result<()> {
    let s = v.shape();
    if s.len() != 2 || s[1] != d {
        return Err(LafError::Width {
            expected: d,
            got: s.get(1).copied().unwrap_or(0),
        });
    }
    Ok(())
}

/// `Q` from `x`, `K` and `V` from `y`; head `h` reads columns
/// `[h·D_H, (h+1)·D_H)`.
pub fn project_multihead<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    x: &Var<'t>,
    y: &Var<'t>,
    cfg: &LafConfig,
    w: &LafWeights,
) -> Result<Projections<'t>> {
    cfg.validate()?;
    check_width(x, cfg.d_model)?;
    check_width(y, cfg.d_model)?;
    let q = w.q_proj.forward(tape, store, x)?;
    let k = w.k_proj.forward(tape, store, y)?;
    let v = w.v_proj.forward(tape, store, y)?;
    let dh = cfg.head_dim;
    let heads = (0..cfg.heads)
        .map(|h| {
            let (a, b) = (h * dh, (h + 1) * dh);
            Ok((q.slice_cols(a, b)?, k.slice_cols(a, b)?, v.slice_cols(a, b)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Projections { q, k, v, heads })
}

/// `ω = Q_h · K_hᵀ`, unscaled.
pub fn cooccurrence_scores<'t>(qh: &Var<'t>, kh: &Var<'t>) -> Result<Var<'t>> {
    Ok(qh.matmul(&kh.transpose()?)?)
}

/// Output of one LAF block.
pub struct LafOutput<'t> {
    /// Pooled descriptor, length `D` or `2D`.
    pub pooled: Var<'t>,
    /// `N_X × D` enhanced tokens before the two FC layers.
    pub g_out: Var<'t>,
    /// `N_X × D` head concatenation before the output projection.
    pub aggregated: Var<'t>,
    pub gates: Vec<GateMatrix>,
}

pub fn pool<'t>(tokens: &Var<'t>, mode: PoolMode) -> Result<Var<'t>> {
    let max = tokens.reduce(0, ReduceMode::Max)?;
    Ok(match mode {
        PoolMode::Max => max,
        PoolMode::MaxConcatMean => concat(&[max, tokens.reduce(0, ReduceMode::Mean)?], 0)?,
    })
}

/// Enhances query tokens `x` with key/value tokens `y`.
pub fn laf_forward<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    x: &Var<'t>,
    y: &Var<'t>,
    cfg: &LafConfig,
    w: &LafWeights,
) -> Result<LafOutput<'t>> {
    let proj = project_multihead(tape, store, x, y, cfg, w)?;
    let mut parts = Vec::with_capacity(cfg.heads);
    let mut gates = Vec::with_capacity(cfg.heads);
    for (qh, kh, vh) in &proj.heads {
        let omega = cooccurrence_scores(qh, kh)?;
        let alpha = match cfg.attention_mode {
            AttentionMode::ThresholdedSigmoid => omega.threshold_gate(cfg.beta),
            AttentionMode::Softmax => omega.softmax_rows(),
        };
        gates.push(GateMatrix::from_alpha((*alpha.value()).clone()));
        parts.push(alpha.masked_aggregate(vh, cfg.eps)?);
    }
    let aggregated = concat(&parts, 1)?;
    let g_out = w.out_proj.forward(tape, store, &aggregated)?.add(&proj.q)?;
    let h = w.fc1.forward_relu(tape, store, &g_out)?;
    let h = w.fc2.forward_relu(tape, store, &h)?;
    Ok(LafOutput {
        pooled: pool(&h, cfg.pool_mode)?,
        g_out,
        aggregated,
        gates,
    })
}
