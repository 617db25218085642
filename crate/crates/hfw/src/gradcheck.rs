//! Finite-difference suite behind the `gradcheck` command: every kernel,
//! the attention block, the HFW module and a shrunken copy of the chosen
//! architecture run end to end through the episode loss.

use hfw_core::backbones::flat::{block_forward, Block};
use hfw_core::backbones::{BackboneConfig, EmbedMode, FlatBackboneConfig, HierBackboneConfig, Model, ModelConfig};
use hfw_core::gradcheck::{grad_check, GradReport};
use hfw_core::hfw::{hfw_forward, FastMemory, HfwConfig, HfwParams};
use hfw_core::nn::{Bound, Init, ParamStore};
use hfw_core::protonet::episode_forward;
use hfw_core::{Graph, Result, Tensor, Var};
use serde::Serialize;

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    /// Leaf holding the largest error.
    pub worst: String,
    pub passed: bool,
}

fn rand(seed: u64, name: &str, shape: &[usize]) -> Tensor<f64> {
    Init { seed }.uniform(name, shape, 1.0)
}

fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(rand(seed ^ 0x5eed, "proj", g.shape(y)));
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

/// Worst result of `check` over `seeds` seeds.
fn over_seeds(name: &str, seeds: u64, mut check: impl FnMut(u64) -> Result<GradReport>) -> Result<CheckEntry> {
    let mut entry = CheckEntry {
        name: name.to_string(),
        max_rel_err: 0.0,
        worst: String::new(),
        passed: true,
    };
    for seed in 0..seeds {
        let r = check(seed)?;
        if let Some(w) = r.worst() {
            if w.max_rel_err >= entry.max_rel_err {
                entry.max_rel_err = w.max_rel_err;
                entry.worst = format!("{} (seed {seed})", w.name);
            }
        }
        entry.passed &= r.passed();
    }
    Ok(entry)
}

type Op = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

fn kernels() -> Vec<(&'static str, Vec<Vec<usize>>, Op)> {
    vec![
        ("add", vec![vec![3, 4], vec![4]], |g, v| g.add(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 1]], |g, v| g.mul(v[0], v[1])),
        ("matmul", vec![vec![2, 3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("sigmoid", vec![vec![2, 5]], |g, v| Ok(g.sigmoid(v[0]))),
        ("gelu", vec![vec![2, 5]], |g, v| Ok(g.gelu(v[0]))),
        ("clamp", vec![vec![2, 5]], |g, v| g.clamp(v[0], -0.7, 0.8)),
        ("softmax", vec![vec![3, 5]], |g, v| g.softmax(v[0])),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |g, v| {
            g.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-6)
        }),
        ("frobenius_normalize", vec![vec![2, 3, 3]], |g, v| g.frobenius_normalize(v[0], 1e-6)),
        ("mean_axis", vec![vec![2, 3, 4]], |g, v| g.mean_axis(v[0], 1)),
        ("roll", vec![vec![2, 5]], |g, v| g.roll(v[0], 1, 2)),
        ("cross_entropy", vec![vec![4, 3]], |g, v| g.cross_entropy(v[0], &[0, 2, 1, 2])),
    ]
}

/// Width-8 copy of `cfg`'s family with the same HFW and embedding settings.
pub fn shrink(cfg: &ModelConfig) -> (ModelConfig, usize, usize) {
    let hfw = |dim: usize, heads: usize| {
        cfg.hfw().map(|h| HfwConfig {
            dim,
            heads,
            ..h.clone()
        })
    };
    match &cfg.backbone {
        BackboneConfig::Flat(f) => (
            ModelConfig {
                name: format!("{}_tiny", cfg.name),
                backbone: BackboneConfig::Flat(FlatBackboneConfig {
                    depth: 2,
                    dim: 8,
                    heads: 2,
                    mlp_ratio: 2,
                    patch: 2,
                    in_channels: 2,
                    image_size: 4,
                    hfw: hfw(8, 2),
                    embed_mode: if f.embed_mode == EmbedMode::Cls { EmbedMode::Cls } else { EmbedMode::Gap },
                }),
            },
            2,
            4,
        ),
        BackboneConfig::Hier(_) => (
            ModelConfig {
                name: format!("{}_tiny", cfg.name),
                backbone: BackboneConfig::Hier(HierBackboneConfig {
                    stage_depths: vec![2, 1],
                    stage_dims: vec![4, 8],
                    stage_heads: vec![1, 2],
                    window: 2,
                    shift: true,
                    patch: 1,
                    in_channels: 3,
                    image_size: 4,
                    mlp_ratio: 2,
                    hfw: hfw(8, 2),
                }),
            },
            3,
            4,
        ),
    }
}

/// Runs every check over `seeds` seeds at tolerance [`TOLERANCE`].
pub fn run_suite(cfg: &ModelConfig, seeds: u64) -> Result<Vec<CheckEntry>> {
    let mut out = Vec::new();
    for (name, shapes, op) in kernels() {
        out.push(over_seeds(name, seeds, |s| {
            let leaves: Vec<(&str, Tensor<f64>)> = shapes
                .iter()
                .enumerate()
                .map(|(i, sh)| ("input", rand(s, &format!("{name}{i}"), sh)))
                .collect();
            grad_check(
                |g, v| {
                    let y = op(g, v)?;
                    project(g, y, s)
                },
                &leaves,
                TOLERANCE,
            )
        })?);
    }

    out.push(over_seeds("attention_block", seeds, |s| {
        let mut store = ParamStore::new();
        let block = Block::register(&mut store, Init { seed: s }, "b", 8, 2, 2)?;
        store_check(&store, vec![("x", rand(s, "x", &[2, 3, 8]))], |g, p, x| {
            let y = block_forward(g, p, &block, x[0])?;
            project(g, y, s)
        })
    })?);

    let hcfg = cfg.hfw().map(|h| HfwConfig { dim: 6, heads: 2, ..h.clone() });
    if let Some(hcfg) = hcfg {
        out.push(over_seeds("hfw_module", seeds, |s| {
            let mut store = ParamStore::new();
            let hp = HfwParams::register(&mut store, Init { seed: s }, "hfw", &hcfg)?;
            store.set("hfw.eta_logit", rand(s, "eta", &[]))?;
            store.set("hfw.lambda_logit", rand(s, "lambda", &[]))?;
            store_check(&store, vec![("x", rand(s, "x", &[2, 4, 6]))], |g, p, x| {
                let (y, mem) = hfw_forward(g, p, &hp, &hcfg, x[0], FastMemory::zeroed())?;
                let (y2, _) = hfw_forward(g, p, &hp, &hcfg, x[0], mem)?;
                let y = g.add(y, y2)?;
                project(g, y, s)
            })
        })?);
    }

    let (tiny, ch, size) = shrink(cfg);
    out.push(over_seeds("episode_loss", seeds, |s| {
        // generic O(1) parameter point; see the gradient tests for why
        let mut model = Model::<f64>::new(tiny.clone(), s)?;
        let names: Vec<(String, Vec<usize>)> =
            model.params().iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
        for (n, shape) in names {
            model.params_mut().set(&n, rand(s, &n, &shape))?;
        }
        let np = model.params().len();
        let mut leaves: Vec<(&str, Tensor<f64>)> =
            model.params().iter().map(|p| (p.name.as_str(), p.value.clone())).collect();
        leaves.push(("support", rand(s, "support", &[2, ch, size, size])));
        leaves.push(("query", rand(s, "query", &[2, ch, size, size])));
        grad_check(
            |g, v| {
                let p = Bound::from_vars(v[..np].to_vec());
                Ok(episode_forward(&model, g, &p, v[np], &[0, 1], v[np + 1], &[1, 0], 2)?.loss)
            },
            &leaves,
            TOLERANCE,
        )
    })?);
    Ok(out)
}

/// Checks parameters of `store` together with extra input leaves.
fn store_check(
    store: &ParamStore<f64>,
    inputs: Vec<(&'static str, Tensor<f64>)>,
    f: impl Fn(&mut Graph<f64>, &Bound, &[Var]) -> Result<Var>,
) -> Result<GradReport> {
    let np = store.len();
    let mut leaves: Vec<(&str, Tensor<f64>)> = store.iter().map(|p| (p.name.as_str(), p.value.clone())).collect();
    leaves.extend(inputs);
    grad_check(
        |g, v| {
            let p = Bound::from_vars(v[..np].to_vec());
            f(g, &p, &v[np..])
        },
        &leaves,
        TOLERANCE,
    )
}
