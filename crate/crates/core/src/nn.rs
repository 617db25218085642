//! Named parameter storage and the small layers the backbones are built from.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether decoupled weight decay applies (matrices only).
    pub decay: bool,
}

/// Ordered, uniquely named trainable tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>, decay: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name '{name}'")));
        }
        self.index.insert(name.into(), self.params.len());
        self.params.push(Param {
            name: name.into(),
            value,
            decay,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total element count over all tensors.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces a tensor by name, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))?;
        let slot = &mut self.params[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::dim("set_param", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    /// Registers every tensor as a differentiable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.params.iter().map(|p| g.param(p.value.clone())).collect())
    }
}

/// Graph variables for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Binds externally created variables, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Deterministic per-parameter initialization.
///
/// Each tensor draws from its own stream keyed by (seed, name), so adding or
/// removing unrelated parameters never changes the others' initial values.
#[derive(Clone, Copy, Debug)]
pub struct Init {
    pub seed: u64,
}

pub(crate) fn name_hash(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Init {
    fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name))
    }

    /// Uniform with variance `1 / fan_in`.
    pub fn fan_in_uniform<T: Element>(&self, name: &str, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = (3.0 / fan_in.max(1) as f64).sqrt();
        self.uniform(name, shape, bound)
    }

    pub fn uniform<T: Element>(&self, name: &str, shape: &[usize], bound: f64) -> Tensor<T> {
        let mut rng = self.rng(name);
        let n = crate::tensor::numel(shape);
        let data = (0..n)
            .map(|_| T::of(rng.random_range(-bound..=bound)))
            .collect();
        Tensor::new(shape, data).expect("numel matches")
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        init: Init,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let weight = store.add(&wname, init.fan_in_uniform(&wname, &[fan_in, fan_out], fan_in), true)?;
        let bias = if bias {
            Some(store.add(&format!("{name}.bias"), Tensor::zeros(&[fan_out]), false)?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn param_count(fan_in: usize, fan_out: usize, bias: bool) -> usize {
        fan_in * fan_out + if bias { fan_out } else { 0 }
    }

    /// `x · W (+ b)` over the last axis.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => g.add(y, p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub eps: f64,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn register<T: Element>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::ones(&[dim]), false)?;
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(&[dim]), false)?;
        Ok(LayerNorm {
            gamma: Some(gamma),
            beta: Some(beta),
            eps: LN_EPS,
        })
    }

    /// Normalization only, without learnable affine.
    pub fn plain() -> Self {
        LayerNorm {
            gamma: None,
            beta: None,
            eps: LN_EPS,
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(
            x,
            self.gamma.map(|id| p.var(id)),
            self.beta.map(|id| p.var(id)),
            T::of(self.eps),
        )
    }
}

/// Multi-head self-attention over token sequences `[B, N, d]`.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        init: Init,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Attention {
            qkv: Linear::register(store, init, &format!("{name}.qkv"), dim, 3 * dim, true)?,
            proj: Linear::register(store, init, &format!("{name}.proj"), dim, dim, true)?,
            heads,
            dim,
        })
    }

    pub fn param_count(dim: usize) -> usize {
        Linear::param_count(dim, 3 * dim, true) + Linear::param_count(dim, dim, true)
    }

    /// Attention probabilities `[B, H, N, N]` and the attended output.
    pub fn forward_with_probs<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::dim("attention", &s, &[self.dim]));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let h = self.heads;
        let dh = d / h;
        let qkv = self.qkv.forward(g, p, x)?;
        let qkv = g.reshape(qkv, &[b, n, 3, h, dh])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let q = g.narrow(qkv, 0, 0, 1)?;
        let k = g.narrow(qkv, 0, 1, 1)?;
        let v = g.narrow(qkv, 0, 2, 1)?;
        let q = g.reshape(q, &[b, h, n, dh])?;
        let k = g.reshape(k, &[b, h, n, dh])?;
        let v = g.reshape(v, &[b, h, n, dh])?;
        let kt = g.transpose_last(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, T::one() / T::of(dh as f64).sqrt());
        let probs = g.softmax(scores)?;
        let ctx = g.matmul(probs, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, n, d])?;
        Ok((probs, self.proj.forward(g, p, ctx)?))
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_with_probs(g, p, x)?.1)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        init: Init,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::register(store, init, &format!("{name}.fc1"), dim, hidden, true)?,
            fc2: Linear::register(store, init, &format!("{name}.fc2"), hidden, dim, true)?,
        })
    }

    pub fn param_count(dim: usize, hidden: usize) -> usize {
        Linear::param_count(dim, hidden, true) + Linear::param_count(hidden, dim, true)
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}
