//! Vision transformer backbones with Hebbian fast-weight placement.
//!
//! Two families are supported:
//! - [`flat`]: ViT/DeiT-style token transformer, optionally with one HFW
//!   module beside every block (`x ← Block(x) + HFW(Norm(x))`).
//! - [`hier`]: Swin-style hierarchy of window-attention stages joined by patch
//!   merging, optionally with a single HFW module on the final-stage tokens
//!   before pooling (`z = GAP(x + HFW(x))`).

pub mod flat;
pub mod hier;
pub mod presets;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::hfw::{FastMemory, HfwConfig, HfwParams, MemoryScope};
use crate::nn::{Bound, Init, ParamStore};
use crate::tensor::Tensor;

pub use flat::{FlatBackboneConfig, EmbedMode};
pub use hier::HierBackboneConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneConfig {
    Flat(FlatBackboneConfig),
    Hier(HierBackboneConfig),
}

/// Architecture description, enough to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub backbone: BackboneConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        match &self.backbone {
            BackboneConfig::Flat(c) => c.validate(),
            BackboneConfig::Hier(c) => c.validate(),
        }
    }

    pub fn image_size(&self) -> usize {
        match &self.backbone {
            BackboneConfig::Flat(c) => c.image_size,
            BackboneConfig::Hier(c) => c.image_size,
        }
    }

    pub fn in_channels(&self) -> usize {
        match &self.backbone {
            BackboneConfig::Flat(c) => c.in_channels,
            BackboneConfig::Hier(c) => c.in_channels,
        }
    }

    pub fn hfw(&self) -> Option<&HfwConfig> {
        match &self.backbone {
            BackboneConfig::Flat(c) => c.hfw.as_ref(),
            BackboneConfig::Hier(c) => c.hfw.as_ref(),
        }
    }

    pub fn hfw_mut(&mut self) -> Option<&mut HfwConfig> {
        match &mut self.backbone {
            BackboneConfig::Flat(c) => c.hfw.as_mut(),
            BackboneConfig::Hier(c) => c.hfw.as_mut(),
        }
    }

    /// Same architecture with the HFW modules removed.
    pub fn without_hfw(&self) -> Self {
        let mut c = self.clone();
        match &mut c.backbone {
            BackboneConfig::Flat(f) => f.hfw = None,
            BackboneConfig::Hier(h) => h.hfw = None,
        }
        c
    }

    pub fn embed_dim(&self) -> usize {
        match &self.backbone {
            BackboneConfig::Flat(c) => c.dim,
            BackboneConfig::Hier(c) => *c.stage_dims.last().unwrap_or(&0),
        }
    }
}

/// Per-module fast memories carried between forward calls of one episode.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryState {
    pub slots: Vec<FastMemory>,
}

impl MemoryState {
    pub fn zeroed(modules: usize) -> Self {
        MemoryState {
            slots: alloc::vec![FastMemory::zeroed(); modules],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.slots.iter().all(|m| m.is_zero())
    }
}

#[allow(clippy::large_enum_variant)]
enum Net {
    Flat(flat::FlatNet),
    Hier(hier::HierNet),
}

/// A backbone with its trainable parameters.
pub struct Model<T: Element> {
    config: ModelConfig,
    params: ParamStore<T>,
    net: Net,
}

impl<T: Element> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let init = Init { seed };
        let mut params = ParamStore::new();
        let net = match &config.backbone {
            BackboneConfig::Flat(c) => Net::Flat(flat::FlatNet::register(&mut params, init, c)?),
            BackboneConfig::Hier(c) => Net::Hier(hier::HierNet::register(&mut params, init, c)?),
        };
        Ok(Model { config, params, net })
    }

    /// Rebuilds a model from stored tensors. Every tensor of the architecture
    /// must be supplied exactly once, with the registered shape.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let mut seen = alloc::vec![false; model.params.len()];
        for (name, t) in tensors {
            let id = model
                .params
                .id(&name)
                .ok_or_else(|| Error::Config(format!("unknown tensor '{name}' for this architecture")))?;
            if core::mem::replace(&mut seen[id.index()], true) {
                return Err(Error::Config(format!("tensor '{name}' supplied twice")));
            }
            model.params.set(&name, t)?;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let name = &model.params.iter().nth(i).expect("index in range").name;
            return Err(Error::Config(format!("missing tensor '{name}'")));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Trainable element count; fast memory is not a parameter.
    pub fn count_parameters(&self) -> usize {
        self.params.numel()
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim()
    }

    pub fn image_size(&self) -> usize {
        self.config.image_size()
    }

    pub fn hfw_modules(&self) -> &[HfwParams] {
        match &self.net {
            Net::Flat(n) => &n.hfw,
            Net::Hier(n) => n.hfw.as_slice(),
        }
    }

    pub fn memory_scope(&self) -> Option<MemoryScope> {
        self.config.hfw().map(|h| h.memory_scope)
    }

    pub fn new_memory(&self) -> MemoryState {
        MemoryState::zeroed(self.hfw_modules().len())
    }

    /// Learned (η, λ) of every HFW module, in placement order.
    pub fn plasticity(&self) -> Vec<(f64, f64)> {
        match self.config.hfw() {
            Some(cfg) => self
                .hfw_modules()
                .iter()
                .map(|m| m.plasticity(&self.params, cfg))
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.params.bind(g)
    }

    /// Images `[B, C, S, S]` (S = configured image size) → embeddings `[B, d]`.
    pub fn embed(&self, g: &mut Graph<T>, p: &Bound, images: Var, memory: &mut MemoryState) -> Result<Var> {
        if memory.slots.len() != self.hfw_modules().len() {
            return Err(Error::State(format!(
                "memory has {} slots, model has {} HFW modules",
                memory.slots.len(),
                self.hfw_modules().len()
            )));
        }
        match (&self.net, &self.config.backbone) {
            (Net::Flat(n), BackboneConfig::Flat(c)) => n.forward(g, p, c, images, memory),
            (Net::Hier(n), BackboneConfig::Hier(c)) => n.forward(g, p, c, images, memory),
            _ => unreachable!("net built from its own config"),
        }
    }

    /// Convenience evaluation without gradients on fresh memory.
    pub fn embed_images(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let p = self.bind(&mut g);
        let x = g.constant(images.clone());
        let mut mem = self.new_memory();
        let z = self.embed(&mut g, &p, x, &mut mem)?;
        Ok(g.value(z).clone())
    }
}

/// Splits `[B, C, H, W]` into `[B, N, C·p²]` patch tokens inside a graph.
pub(crate) fn patch_tokens<T: Element>(g: &mut Graph<T>, images: Var, patch: usize) -> Result<(Var, usize, usize)> {
    let s = g.shape(images).to_vec();
    if s.len() != 4 || patch == 0 || !s[2].is_multiple_of(patch) || !s[3].is_multiple_of(patch) {
        return Err(Error::dim("patchify", &s, &[patch]));
    }
    let (b, c, gh, gw) = (s[0], s[1], s[2] / patch, s[3] / patch);
    let r = g.reshape(images, &[b, c, gh, patch, gw, patch])?;
    let r = g.permute(r, &[0, 2, 4, 1, 3, 5])?;
    Ok((g.reshape(r, &[b, gh * gw, c * patch * patch])?, gh, gw))
}
