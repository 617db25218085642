//! Hebbian fast-weight memory.
//!
//! A block of learned projections builds keys, values and queries from a
//! token sequence, writes their clamped co-activation into a transient
//! per-head associative matrix, reads it back with the queries, and gates the
//! result:
//!
//! ```text
//! K, V, Q = x W_K, x W_V, x W_Q                  (split into H heads)
//! A       = clamp(Kᵀ V / √N, −δ, δ)
//! M       = λ M + η A;   M ← M / (‖M‖_F + ε)      (per batch item and head)
//! r̂       = Q M                                   (heads merged)
//! out     = LayerNorm(σ(x W_g) ⊙ r̂)
//! η = σ(η_logit)·η_max,  λ = σ(λ_logit)
//! ```
//!
//! `M` only ever lives inside a [`Graph`]; it is never part of the
//! [`ParamStore`] and therefore never reaches a checkpoint.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::kernels::sigmoid;
use crate::nn::{Bound, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

/// When the fast memory is reset to zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryScope {
    /// Fresh memory on every forward call.
    #[default]
    PerForward,
    /// Memory threads through the support items of one episode.
    PerEpisode,
}

/// Output gate behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    #[default]
    Learned,
    /// Gate held at exactly zero (ablation): the module emits `LayerNorm(0)`.
    Closed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HfwConfig {
    pub dim: usize,
    pub heads: usize,
    #[serde(default = "default_one")]
    pub eta_max: f64,
    #[serde(default = "default_one")]
    pub delta: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub memory_scope: MemoryScope,
    #[serde(default)]
    pub gate: GateMode,
}

fn default_one() -> f64 {
    1.0
}

fn default_eps() -> f64 {
    1e-6
}

pub const ETA_LOGIT_INIT: f64 = -3.0;
pub const LAMBDA_LOGIT_INIT: f64 = 2.0;

impl HfwConfig {
    pub fn new(dim: usize, heads: usize) -> Self {
        HfwConfig {
            dim,
            heads,
            eta_max: 1.0,
            delta: 1.0,
            eps: 1e-6,
            memory_scope: MemoryScope::PerForward,
            gate: GateMode::Learned,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hfw width {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        for (name, v) in [("eta_max", self.eta_max), ("delta", self.delta), ("eps", self.eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("hfw {name} must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Trainable element count: four d×d projections, LayerNorm affine, two logits.
    pub fn param_count(&self) -> usize {
        4 * self.dim * self.dim + 2 * self.dim + 2
    }
}

/// Learned parameters of one HFW module, as handles into a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct HfwParams {
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_q: Linear,
    pub w_g: Linear,
    pub eta_logit: ParamId,
    pub lambda_logit: ParamId,
    pub norm: LayerNorm,
}

impl HfwParams {
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        init: Init,
        prefix: &str,
        cfg: &HfwConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let lin = |store: &mut ParamStore<T>, n: &str| {
            Linear::register(store, init, &format!("{prefix}.{n}"), d, d, false)
        };
        let w_k = lin(store, "w_k")?;
        let w_v = lin(store, "w_v")?;
        let w_q = lin(store, "w_q")?;
        let w_g = lin(store, "w_g")?;
        let eta_logit = store.add(
            &format!("{prefix}.eta_logit"),
            Tensor::scalar(T::of(ETA_LOGIT_INIT)),
            false,
        )?;
        let lambda_logit = store.add(
            &format!("{prefix}.lambda_logit"),
            Tensor::scalar(T::of(LAMBDA_LOGIT_INIT)),
            false,
        )?;
        let norm = LayerNorm::register(store, &format!("{prefix}.norm"), d)?;
        Ok(HfwParams {
            w_k,
            w_v,
            w_q,
            w_g,
            eta_logit,
            lambda_logit,
            norm,
        })
    }

    /// Current (η, λ) read straight from the store.
    pub fn plasticity<T: Element>(&self, store: &ParamStore<T>, cfg: &HfwConfig) -> (f64, f64) {
        let eta_logit = store.get(self.eta_logit).value.item().as_f64();
        let lambda_logit = store.get(self.lambda_logit).value.item().as_f64();
        plasticity_from_logits(eta_logit, lambda_logit, cfg.eta_max)
    }
}

pub fn plasticity_from_logits(eta_logit: f64, lambda_logit: f64, eta_max: f64) -> (f64, f64) {
    (sigmoid(eta_logit) * eta_max, sigmoid(lambda_logit))
}

/// Transient associative memory `B×H×d_h×d_h`. `None` is the zero matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FastMemory {
    state: Option<Var>,
}

impl FastMemory {
    pub fn zeroed() -> Self {
        FastMemory { state: None }
    }

    pub fn is_zero(&self) -> bool {
        self.state.is_none()
    }

    pub fn var(&self) -> Option<Var> {
        self.state
    }

    /// Materialized contents (zeros of the given shape when never written).
    pub fn value<T: Element>(&self, g: &Graph<T>, shape: &[usize]) -> Tensor<T> {
        match self.state {
            Some(v) => g.value(v).clone(),
            None => Tensor::zeros(shape),
        }
    }

    /// Memory holding a fixed value, e.g. for tests.
    pub fn from_var(v: Var) -> Self {
        FastMemory { state: Some(v) }
    }
}

/// η and λ as graph scalars, so gradients reach the logits.
pub fn effective_plasticity<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &HfwParams,
    cfg: &HfwConfig,
) -> (Var, Var) {
    let eta = g.sigmoid(p.var(params.eta_logit));
    let eta = g.scale(eta, T::of(cfg.eta_max));
    let lambda = g.sigmoid(p.var(params.lambda_logit));
    (eta, lambda)
}

/// `[B, N, d]` → `[B, H, N, d_h]`.
pub fn split_heads<T: Element>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
        return Err(Error::dim("split_heads", &s, &[heads]));
    }
    let r = g.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    g.permute(r, &[0, 2, 1, 3])
}

/// `[B, H, N, d_h]` → `[B, N, H·d_h]`.
pub fn merge_heads<T: Element>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::dim("merge_heads", &s, &[]));
    }
    let p = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(p, &[s[0], s[2], s[1] * s[3]])
}

pub fn project_kvq<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &HfwParams,
    cfg: &HfwConfig,
    x: Var,
) -> Result<(Var, Var, Var)> {
    let s = g.shape(x);
    if s.len() != 3 || s[2] != cfg.dim {
        return Err(Error::dim("project_kvq", s, &[cfg.dim]));
    }
    let k = params.w_k.forward(g, p, x)?;
    let v = params.w_v.forward(g, p, x)?;
    let q = params.w_q.forward(g, p, x)?;
    Ok((
        split_heads(g, k, cfg.heads)?,
        split_heads(g, v, cfg.heads)?,
        split_heads(g, q, cfg.heads)?,
    ))
}

/// `clamp(Kᵀ V / √N, −δ, δ)` per batch item and head; N is the token count.
pub fn associate<T: Element>(g: &mut Graph<T>, k: Var, v: Var, cfg: &HfwConfig) -> Result<Var> {
    let (sk, sv) = (g.shape(k), g.shape(v));
    if sk != sv || sk.len() != 4 || sk[2] == 0 {
        return Err(Error::dim("associate", sk, sv));
    }
    let n = sk[2];
    let kt = g.transpose_last(k)?;
    let raw = g.matmul(kt, v)?;
    let raw = g.scale(raw, T::one() / T::of(n as f64).sqrt());
    g.clamp(raw, T::of(-cfg.delta), T::of(cfg.delta))
}

/// `M ← normalize(λ M + η A)`.
pub fn memory_write<T: Element>(
    g: &mut Graph<T>,
    mem: FastMemory,
    assoc: Var,
    eta: Var,
    lambda: Var,
    cfg: &HfwConfig,
) -> Result<FastMemory> {
    let written = g.mul(assoc, eta)?;
    let raw = match mem.state {
        Some(m) => {
            let kept = g.mul(m, lambda)?;
            g.add(kept, written)?
        }
        // λ·0 contributes neither value nor gradient
        None => written,
    };
    let m = g.frobenius_normalize(raw, T::of(cfg.eps))?;
    Ok(FastMemory { state: Some(m) })
}

/// `r̂ = Q M` per batch item and head.
pub fn retrieve<T: Element>(g: &mut Graph<T>, q: Var, mem: FastMemory) -> Result<Var> {
    match mem.state {
        Some(m) => g.matmul(q, m),
        None => {
            let zeros = Tensor::zeros(g.shape(q));
            Ok(g.constant(zeros))
        }
    }
}

/// `LayerNorm(σ(x W_g) ⊙ r̂)`.
pub fn gate_output<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &HfwParams,
    cfg: &HfwConfig,
    x: Var,
    retrieved: Var,
) -> Result<Var> {
    if g.shape(x) != g.shape(retrieved) {
        return Err(Error::dim("gate_output", g.shape(x), g.shape(retrieved)));
    }
    let gated = match cfg.gate {
        GateMode::Learned => {
            let gate = params.w_g.forward(g, p, x)?;
            let gate = g.sigmoid(gate);
            g.mul(gate, retrieved)?
        }
        GateMode::Closed => {
            let zeros = g.constant(Tensor::zeros(g.shape(x)));
            g.mul(zeros, retrieved)?
        }
    };
    params.norm.forward(g, p, gated)
}

/// Full module pass. Returns the output and the memory after this call's write.
///
/// Under [`MemoryScope::PerForward`] the incoming memory is ignored and a zero
/// memory is used. Under [`MemoryScope::PerEpisode`] the incoming memory must
/// be zero or shaped `[B or 1, H, d_h, d_h]`; a batch of 1 is shared by all items.
pub fn hfw_forward<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &HfwParams,
    cfg: &HfwConfig,
    x: Var,
    mem: FastMemory,
) -> Result<(Var, FastMemory)> {
    let mem = match cfg.memory_scope {
        MemoryScope::PerForward => FastMemory::zeroed(),
        MemoryScope::PerEpisode => mem,
    };
    let xs = g.shape(x);
    if xs.len() != 3 || xs[2] != cfg.dim {
        return Err(Error::dim("hfw_forward", xs, &[cfg.dim]));
    }
    let b = xs[0];
    if let Some(m) = mem.state {
        let ms = g.shape(m);
        let dh = cfg.head_dim();
        if ms.len() != 4 || (ms[0] != b && ms[0] != 1) || ms[1] != cfg.heads || ms[2] != dh || ms[3] != dh {
            return Err(Error::State(format!(
                "fast memory shaped {:?} does not fit batch {} with {} heads of width {}",
                ms, b, cfg.heads, dh
            )));
        }
    }
    let (k, v, q) = project_kvq(g, p, params, cfg, x)?;
    let assoc = associate(g, k, v, cfg)?;
    let (eta, lambda) = effective_plasticity(g, p, params, cfg);
    let mem = memory_write(g, mem, assoc, eta, lambda, cfg)?;
    let r = retrieve(g, q, mem)?;
    let r = merge_heads(g, r)?;
    let out = gate_output(g, p, params, cfg, x, r)?;
    Ok((out, mem))
}

/// Mean persistence `1 / (1 − λ)` of a memory decayed by λ per write.
pub fn memory_lifetime(lambda: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::Argument(format!("decay λ must lie in [0, 1), got {lambda}")));
    }
    Ok(1.0 / (1.0 - lambda))
}

/// Inverse of the logistic function, for reading logits from reported rates.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
