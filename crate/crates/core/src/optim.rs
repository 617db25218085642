//! AdamW with decoupled weight decay, epoch-level warmup + cosine schedule,
//! and global-norm gradient clipping.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
}

fn default_lr() -> f64 {
    5e-4
}
fn default_wd() -> f64 {
    5e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_clip() -> f64 {
    1.0
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: default_lr(),
            weight_decay: default_wd(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            grad_clip: default_clip(),
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.grad_clip > 0.0
            && [self.lr, self.weight_decay, self.eps, self.grad_clip].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Moment buffers, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        OptimizerState { step: 0, m: zeros(), v: zeros() }
    }
}

/// One AdamW update at learning rate `lr`. Parameters flagged `decay` are
/// first shrunk by `lr·wd`, then every parameter takes the bias-corrected
/// Adam step. Nothing is modified if any gradient is non-finite.
pub fn adamw_step<T: Element>(
    store: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::State(format!(
            "{} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    for (p, gr) in store.iter().zip(grads) {
        if p.value.shape() != gr.shape() {
            return Err(Error::dim("adamw_step", p.value.shape(), gr.shape()));
        }
        if !gr.all_finite() {
            return Err(Error::Numerical(format!("non-finite gradient for '{}'", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = T::of(1.0 - libm::pow(cfg.beta1, t as f64));
    let bc2 = T::of(1.0 - libm::pow(cfg.beta2, t as f64));
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one, lr_t, eps) = (T::one(), T::of(lr), T::of(cfg.eps));
    let shrink = T::of(1.0 - lr * cfg.weight_decay);
    for (i, p) in store.iter_mut().enumerate() {
        let decay = p.decay;
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (w, &gj)) in p.value.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            if decay {
                *w = *w * shrink;
            }
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            *w = *w - lr_t * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            warmup_epochs: 10,
            total_epochs: 60,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 || self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "schedule needs 0 <= warmup ({}) < total ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        Ok(())
    }
}

/// Learning rate for `epoch`: linear warmup to `lr_base`, then half-cosine decay.
pub fn lr_at(epoch: usize, cfg: &ScheduleConfig, lr_base: f64) -> Result<f64> {
    cfg.validate()?;
    if epoch >= cfg.total_epochs {
        return Err(Error::Argument(format!(
            "epoch {epoch} outside schedule of {} epochs",
            cfg.total_epochs
        )));
    }
    let w = cfg.warmup_epochs;
    if epoch < w {
        return Ok(lr_base * (epoch + 1) as f64 / w as f64);
    }
    let frac = (epoch - w) as f64 / (cfg.total_epochs - w) as f64;
    Ok(lr_base * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * frac)))
}

pub fn global_norm<T: Element>(grads: &[Tensor<T>]) -> f64 {
    libm::sqrt(grads.iter().map(|g| g.sum_sq()).sum::<f64>())
}

/// Rescales all gradients so their joint ℓ2 norm is at most `threshold`.
/// Returns the norm before clipping.
pub fn clip_grads<T: Element>(grads: &mut [Tensor<T>], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::Argument(format!("clip threshold must be > 0, got {threshold}")));
    }
    let norm = global_norm(grads);
    if norm > threshold {
        let s = T::of(threshold / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }
    Ok(norm)
}

/// Gradients of every bound parameter in store order; absent ones are zero.
pub fn collect_grads<T: Element>(grads: &mut Gradients<T>, bound: &Bound, store: &ParamStore<T>) -> Vec<Tensor<T>> {
    store
        .ids()
        .map(|id| {
            grads
                .take(bound.var(id))
                .unwrap_or_else(|| Tensor::zeros(store.get(id).value.shape()))
        })
        .collect()
}
