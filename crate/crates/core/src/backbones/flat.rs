use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{patch_tokens, MemoryState};
use crate::autograd::{Graph, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::hfw::{hfw_forward, HfwConfig, HfwParams};
use crate::nn::{Attention, Bound, Init, LayerNorm, Linear, Mlp, ParamId, ParamStore};

/// How a flat backbone turns its token sequence into one embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    /// Mean over patch tokens.
    #[default]
    Gap,
    /// A learned class token prepended to the sequence.
    Cls,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlatBackboneConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub in_channels: usize,
    /// Square input extent after padding; must be a multiple of `patch`.
    pub image_size: usize,
    #[serde(default)]
    pub hfw: Option<HfwConfig>,
    #[serde(default)]
    pub embed_mode: EmbedMode,
}

impl FlatBackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "flat backbone needs depth >= 1 and width {} divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.patch == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of patch {}",
                self.image_size, self.patch
            )));
        }
        if self.mlp_ratio == 0 || self.in_channels == 0 {
            return Err(Error::Config("mlp_ratio and in_channels must be positive".into()));
        }
        if let Some(h) = &self.hfw {
            h.validate()?;
            if h.dim != self.dim {
                return Err(Error::Config(format!("hfw width {} != backbone width {}", h.dim, self.dim)));
            }
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let g = self.image_size / self.patch;
        g * g
    }

    /// Smallest multiple of `patch` that holds a `target`-pixel image.
    pub fn padded_extent(patch: usize, target: usize) -> usize {
        target.div_ceil(patch) * patch
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let patch_dim = self.in_channels * self.patch * self.patch;
        let cls = matches!(self.embed_mode, EmbedMode::Cls) as usize;
        let embed = Linear::param_count(patch_dim, d, true) + (self.tokens() + cls) * d + cls * d;
        let block = 2 * d + Attention::param_count(d) + 2 * d + Mlp::param_count(d, self.mlp_ratio * d);
        let hfw = self.hfw.as_ref().map_or(0, |h| h.param_count());
        embed + self.depth * (block + hfw) + 2 * d
    }
}

/// Pre-norm transformer block: `x + MHSA(LN(x))`, then `+ MLP(LN(·))`.
#[derive(Clone, Copy, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        init: Init,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        Ok(Block {
            norm1: LayerNorm::register(store, &format!("{name}.norm1"), dim)?,
            attn: Attention::register(store, init, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::register(store, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::register(store, init, &format!("{name}.mlp"), dim, mlp_ratio * dim)?,
        })
    }
}

pub fn block_forward<T: Element>(g: &mut Graph<T>, p: &Bound, block: &Block, x: Var) -> Result<Var> {
    let h = block.norm1.forward(g, p, x)?;
    let h = block.attn.forward(g, p, h)?;
    let x = g.add(x, h)?;
    let h = block.norm2.forward(g, p, x)?;
    let h = block.mlp.forward(g, p, h)?;
    g.add(x, h)
}

pub(crate) struct FlatNet {
    embed: Linear,
    pos: ParamId,
    cls: Option<ParamId>,
    blocks: Vec<Block>,
    /// Parameter-free pre-HFW normalization is shared; the modules are per block.
    pub(crate) hfw: Vec<HfwParams>,
    norm: LayerNorm,
}

impl FlatNet {
    pub(crate) fn register<T: Element>(
        store: &mut ParamStore<T>,
        init: Init,
        c: &FlatBackboneConfig,
    ) -> Result<Self> {
        let d = c.dim;
        let embed = Linear::register(store, init, "patch_embed", c.in_channels * c.patch * c.patch, d, true)?;
        let cls = match c.embed_mode {
            EmbedMode::Cls => Some(store.add("cls_token", init.uniform("cls_token", &[1, 1, d], 0.02), false)?),
            EmbedMode::Gap => None,
        };
        let n = c.tokens() + cls.is_some() as usize;
        let pos = store.add("pos_embed", init.uniform("pos_embed", &[n, d], 0.02), false)?;
        let mut blocks = Vec::with_capacity(c.depth);
        let mut hfw = Vec::new();
        for i in 0..c.depth {
            blocks.push(Block::register(store, init, &format!("blocks.{i}"), d, c.heads, c.mlp_ratio)?);
            if let Some(h) = &c.hfw {
                hfw.push(HfwParams::register(store, init, &format!("blocks.{i}.hfw"), h)?);
            }
        }
        let norm = LayerNorm::register(store, "norm", d)?;
        Ok(FlatNet {
            embed,
            pos,
            cls,
            blocks,
            hfw,
            norm,
        })
    }

    pub(crate) fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        c: &FlatBackboneConfig,
        images: Var,
        memory: &mut MemoryState,
    ) -> Result<Var> {
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.image_size || s[3] != c.image_size {
            return Err(Error::dim(
                "flat_forward",
                &s,
                &[c.in_channels, c.image_size, c.image_size],
            ));
        }
        let b = s[0];
        let (tokens, _, _) = patch_tokens(g, images, c.patch)?;
        let mut x = self.embed.forward(g, p, tokens)?;
        if let Some(cls) = self.cls {
            let cls = g.expand(p.var(cls), &[b, 1, c.dim])?;
            x = g.concat(&[cls, x], 1)?;
        }
        x = g.add(x, p.var(self.pos))?;
        let pre_norm = LayerNorm::plain();
        for (i, block) in self.blocks.iter().enumerate() {
            let y = block_forward(g, p, block, x)?;
            x = match (&c.hfw, self.hfw.get(i)) {
                (Some(cfg), Some(params)) => {
                    let xn = pre_norm.forward(g, p, x)?;
                    let (h, mem) = hfw_forward(g, p, params, cfg, xn, memory.slots[i])?;
                    memory.slots[i] = mem;
                    g.add(y, h)?
                }
                _ => y,
            };
        }
        let x = self.norm.forward(g, p, x)?;
        match c.embed_mode {
            EmbedMode::Gap => g.mean_axis(x, 1),
            EmbedMode::Cls => {
                let t = g.narrow(x, 1, 0, 1)?;
                g.reshape(t, &[b, c.dim])
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{BackboneConfig, Model, ModelConfig};
    use crate::hfw::GateMode;
    use crate::tensor::Tensor;

    fn cfg(hfw: bool) -> FlatBackboneConfig {
        FlatBackboneConfig {
            depth: 2,
            dim: 16,
            heads: 4,
            mlp_ratio: 2,
            patch: 4,
            in_channels: 3,
            image_size: 8,
            hfw: hfw.then(|| HfwConfig::new(16, 4)),
            embed_mode: EmbedMode::Gap,
        }
    }

    fn model(c: FlatBackboneConfig) -> Model<f64> {
        Model::new(
            ModelConfig {
                name: "t".into(),
                backbone: BackboneConfig::Flat(c),
            },
            7,
        )
        .unwrap()
    }

    fn images(b: usize, s: usize) -> Tensor<f64> {
        Init { seed: 11 }.uniform("img", &[b, 3, s, s], 1.0)
    }

    #[test]
    fn block_preserves_shape_and_zero_weights_are_identity() {
        let mut store = ParamStore::<f64>::new();
        let block = Block::register(&mut store, Init { seed: 1 }, "b", 8, 2, 4).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Init { seed: 2 }.uniform("x", &[3, 5, 8], 1.0));
        let y = block_forward(&mut g, &p, &block, x).unwrap();
        assert_eq!(g.shape(y), &[3, 5, 8]);

        let names: Vec<_> = store.iter().map(|q| q.name.clone()).collect();
        for n in names {
            let shape = store.get(store.id(&n).unwrap()).value.shape().to_vec();
            store.set(&n, Tensor::zeros(&shape)).unwrap();
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Init { seed: 2 }.uniform("x", &[3, 5, 8], 1.0));
        let y = block_forward(&mut g, &p, &block, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn output_shape() {
        let m = model(cfg(false));
        let z = m.embed_images(&images(2, 8)).unwrap();
        assert_eq!(z.shape(), &[2, 16]);
        assert!(m.embed_images(&images(2, 12)).is_err());
    }

    #[test]
    fn larger_image_shape() {
        let mut c = cfg(false);
        c.dim = 64;
        c.heads = 4;
        c.patch = 16;
        c.image_size = 64;
        c.depth = 1;
        assert_eq!(c.tokens(), 16);
        let m = model(c);
        assert_eq!(m.embed_images(&images(2, 64)).unwrap().shape(), &[2, 64]);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut store = ParamStore::<f64>::new();
        let attn = Attention::register(&mut store, Init { seed: 4 }, "a", 8, 2).unwrap();
        let mut g = Graph::inference();
        let p = store.bind(&mut g);
        let x = g.constant(Init { seed: 5 }.uniform("x", &[2, 5, 8], 3.0));
        let (probs, _) = attn.forward_with_probs(&mut g, &p, x).unwrap();
        for row in g.value(probs).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn cls_mode_uses_token() {
        let mut c = cfg(true);
        c.embed_mode = EmbedMode::Cls;
        let m = model(c.clone());
        assert_eq!(m.count_parameters(), c.param_count());
        assert_eq!(m.embed_images(&images(3, 8)).unwrap().shape(), &[3, 16]);
    }

    #[test]
    fn closed_gate_matches_disabled() {
        let base = model(cfg(false)).embed_images(&images(2, 8)).unwrap();
        let mut c = cfg(true);
        c.hfw.as_mut().unwrap().gate = GateMode::Closed;
        let closed = model(c).embed_images(&images(2, 8)).unwrap();
        assert!(base.max_abs_diff(&closed) < 1e-12);
        let open = model(cfg(true)).embed_images(&images(2, 8)).unwrap();
        assert!(base.max_abs_diff(&open) > 1e-6);
    }

    #[test]
    fn hfw_overhead_per_block() {
        let with = model(cfg(true)).count_parameters();
        let without = model(cfg(false)).count_parameters();
        assert_eq!(with - without, 2 * (4 * 16 * 16 + 2 * 16 + 2));
        assert_eq!(with, cfg(true).param_count());
        let m = model(cfg(true));
        let names: Vec<_> = m.params().iter().filter(|q| q.name.ends_with("eta_logit")).map(|q| q.name.clone()).collect();
        assert_eq!(names, ["blocks.0.hfw.eta_logit", "blocks.1.hfw.eta_logit"]);
    }

    #[test]
    fn invalid_configs() {
        let mut c = cfg(false);
        c.image_size = 10;
        assert!(c.validate().is_err());
        let mut c = cfg(true);
        c.hfw.as_mut().unwrap().dim = 8;
        assert!(c.validate().is_err());
        assert_eq!(FlatBackboneConfig::padded_extent(16, 84), 96);
        assert_eq!(FlatBackboneConfig::padded_extent(8, 28), 32);
    }
}
