use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::flat::Block;
use super::{patch_tokens, MemoryState};
use crate::autograd::{Graph, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::hfw::{hfw_forward, HfwConfig, HfwParams};
use crate::nn::{Attention, Bound, Init, LayerNorm, Linear, Mlp, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierBackboneConfig {
    pub stage_depths: Vec<usize>,
    pub stage_dims: Vec<usize>,
    pub stage_heads: Vec<usize>,
    pub window: usize,
    #[serde(default = "default_true")]
    pub shift: bool,
    pub patch: usize,
    pub in_channels: usize,
    pub image_size: usize,
    pub mlp_ratio: usize,
    #[serde(default)]
    pub hfw: Option<HfwConfig>,
}

fn default_true() -> bool {
    true
}

impl HierBackboneConfig {
    pub fn stages(&self) -> usize {
        self.stage_depths.len()
    }

    /// Token grid side length at each stage.
    pub fn extents(&self) -> Vec<usize> {
        let mut e = self.image_size / self.patch.max(1);
        (0..self.stages())
            .map(|s| {
                if s > 0 {
                    e /= 2;
                }
                e
            })
            .collect()
    }

    pub fn window_at(&self, stage: usize) -> usize {
        self.window.min(self.extents()[stage])
    }

    fn grid_ok(patch: usize, window: usize, stages: usize, size: usize) -> bool {
        if patch == 0 || !size.is_multiple_of(patch) {
            return false;
        }
        let mut e = size / patch;
        for s in 0..stages {
            if s > 0 {
                if !e.is_multiple_of(2) {
                    return false;
                }
                e /= 2;
            }
            if e == 0 || !e.is_multiple_of(window.min(e)) {
                return false;
            }
        }
        true
    }

    /// Smallest extent ≥ `target` whose token grid halves cleanly through all
    /// stages and tiles into windows at each of them.
    pub fn padded_extent(patch: usize, window: usize, stages: usize, target: usize) -> usize {
        let mut e = target.max(1);
        while !Self::grid_ok(patch, window.max(1), stages, e) {
            e += 1;
        }
        e
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        if s == 0 || self.stage_dims.len() != s || self.stage_heads.len() != s {
            return Err(Error::Config("stage depths, dims and heads must have the same non-zero length".into()));
        }
        for i in 0..s {
            let (d, h) = (self.stage_dims[i], self.stage_heads[i]);
            if self.stage_depths[i] == 0 || h == 0 || d == 0 || d % h != 0 {
                return Err(Error::Config(format!("stage {i}: width {d} with {h} heads is invalid")));
            }
        }
        if self.stage_dims.windows(2).any(|w| w[1] != 2 * w[0]) {
            return Err(Error::Config(format!("stage widths {:?} must double per stage", self.stage_dims)));
        }
        if self.window == 0 || self.mlp_ratio == 0 || self.in_channels == 0 {
            return Err(Error::Config("window, mlp_ratio and in_channels must be positive".into()));
        }
        if !Self::grid_ok(self.patch, self.window, s, self.image_size) {
            return Err(Error::Config(format!(
                "image size {} does not tile with patch {}, window {} over {} stages",
                self.image_size, self.patch, self.window, s
            )));
        }
        if let Some(h) = &self.hfw {
            h.validate()?;
            if h.dim != self.stage_dims[s - 1] {
                return Err(Error::Config(format!(
                    "hfw width {} != final stage width {}",
                    h.dim,
                    self.stage_dims[s - 1]
                )));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let c0 = self.stage_dims[0];
        let mut n = Linear::param_count(self.in_channels * self.patch * self.patch, c0, true) + 2 * c0;
        for s in 0..self.stages() {
            let d = self.stage_dims[s];
            let block = 4 * d + Attention::param_count(d) + Mlp::param_count(d, self.mlp_ratio * d);
            n += self.stage_depths[s] * block;
            if s + 1 < self.stages() {
                n += 2 * 4 * d + Linear::param_count(4 * d, self.stage_dims[s + 1], false);
            }
        }
        n += 2 * self.stage_dims[self.stages() - 1];
        n + self.hfw.as_ref().map_or(0, |h| h.param_count())
    }
}

/// Concatenates each 2×2 neighbourhood of `[B, h, w, C]` into `[B, h/2, w/2, 4C]`.
/// The channel blocks are ordered (top-left, bottom-left, top-right, bottom-right).
pub fn patch_merge_tokens<T: Element>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
        return Err(Error::dim("patch_merge", &s, &[2, 2]));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let r = g.reshape(x, &[b, h / 2, 2, w / 2, 2, c])?;
    let r = g.permute(r, &[0, 1, 3, 4, 2, 5])?;
    g.reshape(r, &[b, h / 2, w / 2, 4 * c])
}

/// `[B, H, W, C]` → `[B·nW, win², C]`, windows in row-major order.
pub fn window_partition<T: Element>(g: &mut Graph<T>, x: Var, win: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || win == 0 || !s[1].is_multiple_of(win) || !s[2].is_multiple_of(win) {
        return Err(Error::dim("window_partition", &s, &[win]));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let r = g.reshape(x, &[b, h / win, win, w / win, win, c])?;
    let r = g.permute(r, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(r, &[b * (h / win) * (w / win), win * win, c])
}

pub fn window_reverse<T: Element>(g: &mut Graph<T>, x: Var, win: usize, b: usize, h: usize, w: usize) -> Result<Var> {
    let c = *g.shape(x).last().unwrap_or(&0);
    let r = g.reshape(x, &[b, h / win, w / win, win, win, c])?;
    let r = g.permute(r, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(r, &[b, h, w, c])
}

/// Window self-attention on `[B, H, W, C]`, cyclically shifted by `shift`
/// pixels on both axes beforehand and shifted back afterwards.
pub fn window_attention<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    attn: &Attention,
    x: Var,
    win: usize,
    shift: usize,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, h, w) = (s[0], s[1], s[2]);
    let mut y = x;
    if shift > 0 {
        y = g.roll(y, 1, -(shift as isize))?;
        y = g.roll(y, 2, -(shift as isize))?;
    }
    let wins = window_partition(g, y, win)?;
    let out = attn.forward(g, p, wins)?;
    let mut y = window_reverse(g, out, win, b, h, w)?;
    if shift > 0 {
        y = g.roll(y, 1, shift as isize)?;
        y = g.roll(y, 2, shift as isize)?;
    }
    Ok(y)
}

struct Merge {
    norm: LayerNorm,
    reduce: Linear,
}

pub(crate) struct HierNet {
    embed: Linear,
    embed_norm: LayerNorm,
    stages: Vec<Vec<Block>>,
    merges: Vec<Merge>,
    norm: LayerNorm,
    pub(crate) hfw: Option<HfwParams>,
}

impl HierNet {
    pub(crate) fn register<T: Element>(
        store: &mut ParamStore<T>,
        init: Init,
        c: &HierBackboneConfig,
    ) -> Result<Self> {
        let c0 = c.stage_dims[0];
        let embed = Linear::register(store, init, "patch_embed", c.in_channels * c.patch * c.patch, c0, true)?;
        let embed_norm = LayerNorm::register(store, "patch_embed.norm", c0)?;
        let mut stages = Vec::new();
        let mut merges = Vec::new();
        for s in 0..c.stages() {
            let d = c.stage_dims[s];
            let blocks = (0..c.stage_depths[s])
                .map(|i| Block::register(store, init, &format!("stages.{s}.blocks.{i}"), d, c.stage_heads[s], c.mlp_ratio))
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
            if s + 1 < c.stages() {
                merges.push(Merge {
                    norm: LayerNorm::register(store, &format!("stages.{s}.merge.norm"), 4 * d)?,
                    reduce: Linear::register(store, init, &format!("stages.{s}.merge.reduce"), 4 * d, c.stage_dims[s + 1], false)?,
                });
            }
        }
        let last = c.stage_dims[c.stages() - 1];
        let norm = LayerNorm::register(store, "norm", last)?;
        let hfw = match &c.hfw {
            Some(h) => Some(HfwParams::register(store, init, "hfw", h)?),
            None => None,
        };
        Ok(HierNet {
            embed,
            embed_norm,
            stages,
            merges,
            norm,
            hfw,
        })
    }

    pub(crate) fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        c: &HierBackboneConfig,
        images: Var,
        memory: &mut MemoryState,
    ) -> Result<Var> {
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.image_size || s[3] != c.image_size {
            return Err(Error::dim("hier_forward", &s, &[c.in_channels, c.image_size, c.image_size]));
        }
        let b = s[0];
        let (tokens, gh, gw) = patch_tokens(g, images, c.patch)?;
        let x = self.embed.forward(g, p, tokens)?;
        let x = self.embed_norm.forward(g, p, x)?;
        let mut x = g.reshape(x, &[b, gh, gw, c.stage_dims[0]])?;
        let extents = c.extents();
        for (si, blocks) in self.stages.iter().enumerate() {
            let e = extents[si];
            let win = c.window_at(si);
            let shift_by = if c.shift && e > win { win / 2 } else { 0 };
            for (bi, block) in blocks.iter().enumerate() {
                let shift = if bi % 2 == 1 { shift_by } else { 0 };
                let h = block.norm1.forward(g, p, x)?;
                let h = window_attention(g, p, &block.attn, h, win, shift)?;
                x = g.add(x, h)?;
                let h = block.norm2.forward(g, p, x)?;
                let h = block.mlp.forward(g, p, h)?;
                x = g.add(x, h)?;
            }
            if let Some(m) = self.merges.get(si) {
                let y = patch_merge_tokens(g, x)?;
                let y = m.norm.forward(g, p, y)?;
                x = m.reduce.forward(g, p, y)?;
            }
        }
        let e = extents[extents.len() - 1];
        let d = c.stage_dims[c.stages() - 1];
        let x = self.norm.forward(g, p, x)?;
        let mut x = g.reshape(x, &[b, e * e, d])?;
        if let (Some(cfg), Some(params)) = (&c.hfw, &self.hfw) {
            let (h, mem) = hfw_forward(g, p, params, cfg, x, memory.slots[0])?;
            memory.slots[0] = mem;
            x = g.add(x, h)?;
        }
        g.mean_axis(x, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{BackboneConfig, Model, ModelConfig};
    use crate::tensor::Tensor;

    fn cfg(hfw: bool) -> HierBackboneConfig {
        HierBackboneConfig {
            stage_depths: alloc::vec![2, 2],
            stage_dims: alloc::vec![8, 16],
            stage_heads: alloc::vec![2, 4],
            window: 2,
            shift: true,
            patch: 2,
            in_channels: 3,
            image_size: 8,
            mlp_ratio: 2,
            hfw: hfw.then(|| HfwConfig::new(16, 4)),
        }
    }

    fn model(c: HierBackboneConfig) -> Model<f64> {
        Model::new(
            ModelConfig {
                name: "h".into(),
                backbone: BackboneConfig::Hier(c),
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn merge_order() {
        let mut g = Graph::<f64>::new();
        // [1, 2, 2, 1] grid with values 0 1 / 2 3
        let x = g.constant(Tensor::from_f64(&[1, 2, 2, 1], &[0., 1., 2., 3.]).unwrap());
        let y = patch_merge_tokens(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 4]);
        assert_eq!(g.value(y).data(), &[0., 2., 1., 3.]);
    }

    #[test]
    fn partition_roundtrip() {
        let mut g = Graph::<f64>::new();
        let t = Init { seed: 5 }.uniform("x", &[2, 4, 6, 3], 1.0);
        let x = g.constant(t.clone());
        let w = window_partition(&mut g, x, 2).unwrap();
        assert_eq!(g.shape(w), &[12, 4, 3]);
        let back = window_reverse(&mut g, w, 2, 2, 4, 6).unwrap();
        assert_eq!(g.value(back), &t);
    }

    #[test]
    fn windows_are_independent() {
        // without shift, perturbing one window leaves the others unchanged
        let mut store = ParamStore::<f64>::new();
        let attn = Attention::register(&mut store, Init { seed: 1 }, "a", 4, 2).unwrap();
        let run = |t: Tensor<f64>| {
            let mut g = Graph::inference();
            let p = store.bind(&mut g);
            let x = g.constant(t);
            let y = window_attention(&mut g, &p, &attn, x, 2, 0).unwrap();
            g.value(y).clone()
        };
        let a = Init { seed: 2 }.uniform("x", &[1, 4, 4, 4], 1.0);
        let mut b = a.clone();
        b.data_mut()[0] += 1.0;
        let (ya, yb) = (run(a), run(b));
        for (i, (u, v)) in ya.data().iter().zip(yb.data()).enumerate() {
            let (r, c) = (i / 16, (i / 4) % 4);
            if r >= 2 || c >= 2 {
                assert_eq!(u, v);
            }
        }
    }

    #[test]
    fn shapes_and_counts() {
        for hfw in [false, true] {
            let c = cfg(hfw);
            let m = model(c.clone());
            assert_eq!(m.count_parameters(), c.param_count());
            let z = m.embed_images(&Init { seed: 9 }.uniform("i", &[2, 3, 8, 8], 1.0)).unwrap();
            assert_eq!(z.shape(), &[2, 16]);
            assert!(z.all_finite());
        }
        assert_eq!(model(cfg(true)).hfw_modules().len(), 1);
    }

    #[test]
    fn full_window_is_global_attention() {
        let mut store = ParamStore::<f64>::new();
        let attn = Attention::register(&mut store, Init { seed: 1 }, "a", 4, 2).unwrap();
        let t = Init { seed: 2 }.uniform("x", &[2, 3, 3, 4], 1.0);
        let mut g = Graph::inference();
        let p = store.bind(&mut g);
        let x = g.constant(t);
        let w = window_attention(&mut g, &p, &attn, x, 3, 0).unwrap();
        let flat = g.reshape(x, &[2, 9, 4]).unwrap();
        let full = attn.forward(&mut g, &p, flat).unwrap();
        let full = g.reshape(full, &[2, 3, 3, 4]).unwrap();
        assert!(g.value(w).max_abs_diff(g.value(full)) < 1e-12);
    }

    #[test]
    fn shift_round_trip_with_zero_attention() {
        let mut store = ParamStore::<f64>::new();
        let attn = Attention::register(&mut store, Init { seed: 1 }, "a", 4, 2).unwrap();
        for n in ["a.qkv.weight", "a.qkv.bias", "a.proj.weight"] {
            let s = store.get(store.id(n).unwrap()).value.shape().to_vec();
            store.set(n, Tensor::zeros(&s)).unwrap();
        }
        let bias = Init { seed: 3 }.uniform("b", &[4], 1.0);
        store.set("a.proj.bias", bias.clone()).unwrap();
        let mut g = Graph::inference();
        let p = store.bind(&mut g);
        let x = g.constant(Init { seed: 2 }.uniform("x", &[1, 4, 4, 4], 1.0));
        let y = window_attention(&mut g, &p, &attn, x, 2, 1).unwrap();
        // zero projections: every position receives exactly the output bias
        for chunk in g.value(y).data().chunks(4) {
            assert_eq!(chunk, bias.data());
        }
    }

    #[test]
    fn merge_of_constant_input_is_constant() {
        let mut store = ParamStore::<f64>::new();
        let norm = LayerNorm::register(&mut store, "n", 8).unwrap();
        let reduce = Linear::register(&mut store, Init { seed: 1 }, "r", 8, 4, false).unwrap();
        let mut g = Graph::inference();
        let p = store.bind(&mut g);
        let px = Tensor::from_f64(&[2], &[0.3, -1.2]).unwrap();
        let grid = Tensor::new(&[1, 4, 4, 2], px.data().repeat(16)).unwrap();
        let x = g.constant(grid);
        let m = patch_merge_tokens(&mut g, x).unwrap();
        let m = norm.forward(&mut g, &p, m).unwrap();
        let y = reduce.forward(&mut g, &p, m).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 2, 4]);
        let v = g.value(y).data();
        for chunk in v.chunks(4) {
            assert_eq!(chunk, &v[..4]);
        }
    }

    #[test]
    fn full_preset_extents() {
        let c = crate::backbones::presets::preset("swin_tiny_hebbian", 84).unwrap();
        let crate::backbones::BackboneConfig::Hier(h) = &c.backbone else { panic!() };
        assert_eq!(h.extents(), [24, 12, 6, 3]);
        assert_eq!(h.stage_dims, [96, 192, 384, 768]);
        let mut base = h.clone();
        base.hfw = None;
        assert_eq!(h.param_count() - base.param_count(), 4 * 768 * 768 + 2 * 768 + 2);
        let mut bad = h.clone();
        bad.stage_dims[1] = 100;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn extents_and_padding() {
        let c = cfg(false);
        assert_eq!(c.extents(), [4, 2]);
        assert_eq!(c.window_at(1), 2);
        assert_eq!(HierBackboneConfig::padded_extent(4, 6, 4, 84), 96);
        assert_eq!(HierBackboneConfig::padded_extent(2, 4, 2, 28), 32);
        let mut bad = cfg(false);
        bad.image_size = 6;
        assert!(bad.validate().is_err());
    }
}
