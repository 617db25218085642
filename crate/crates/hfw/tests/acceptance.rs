//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Run with `cargo test --release -p hfw --test acceptance` (the test profile
//! is already optimized, so plain `cargo test` works too).

mod support;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use hfw::checkpoint::{decode, digest, encode, load_checkpoint, save_checkpoint, CheckpointMeta};
use hfw::commands::{cmd_ablate, cmd_train, Overrides, DEFAULT_K};
use hfw::config::ExperimentConfig;
use hfw::gradcheck::run_suite;
use hfw::train::{Observer, Silent};
use hfw::AppError;
use hfw_core::backbones::presets::preset;
use hfw_core::backbones::{Model, ModelConfig};
use hfw_core::fewshot::{split_classes, Partition};
use hfw_core::gradcheck::grad_check;
use hfw_core::hfw::{
    associate, hfw_forward, memory_lifetime, memory_write, plasticity_from_logits, FastMemory, GateMode, HfwConfig,
    HfwParams, MemoryScope, ETA_LOGIT_INIT,
};
use hfw_core::nn::{Init, ParamStore, LN_EPS};
use hfw_core::protonet::episode_forward;
use hfw_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{oracle_forward, Memory, OracleWeights};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    ensure(elapsed < limit, || format!("{what} took {:.1}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()))
}

fn rand_tensor(seed: u64, name: &str, shape: &[usize], bound: f64) -> Tensor<f64> {
    Init { seed }.uniform(name, shape, bound)
}

fn nested(t: &Tensor<f64>) -> Vec<Vec<Vec<f64>>> {
    let s = t.shape();
    t.data().chunks(s[1] * s[2]).map(|b| b.chunks(s[2]).map(|r| r.to_vec()).collect()).collect()
}

fn matrix(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let s = t.shape();
    t.data().chunks(s[1]).map(|r| r.to_vec()).collect()
}

fn memory_of(t: &Tensor<f64>) -> Memory {
    let s = t.shape();
    t.data()
        .chunks(s[1] * s[2] * s[3])
        .map(|b| b.chunks(s[2] * s[3]).map(|h| h.chunks(s[3]).map(|r| r.to_vec()).collect()).collect())
        .collect()
}

fn max_diff(a: &[Vec<Vec<f64>>], b: &[Vec<Vec<f64>>]) -> f64 {
    a.iter()
        .flatten()
        .flatten()
        .zip(b.iter().flatten().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// A module with every parameter randomized, including the LayerNorm affine.
fn random_module(seed: u64, cfg: &HfwConfig) -> (ParamStore<f64>, HfwParams) {
    let mut store = ParamStore::new();
    let hp = HfwParams::register(&mut store, Init { seed }, "m", cfg).unwrap();
    let names: Vec<(String, Vec<usize>)> = store.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
    for (n, shape) in names {
        let bound = if n.contains("logit") { 3.0 } else { 1.0 };
        store.set(&n, rand_tensor(seed, &n, &shape, bound)).unwrap();
    }
    (store, hp)
}

fn oracle_weights(store: &ParamStore<f64>, hp: &HfwParams, cfg: &HfwConfig) -> OracleWeights {
    let w = |id| matrix(&store.get(id).value);
    let (eta, lambda) = hp.plasticity(store, cfg);
    OracleWeights {
        w_k: w(hp.w_k.weight),
        w_v: w(hp.w_v.weight),
        w_q: w(hp.w_q.weight),
        w_g: w(hp.w_g.weight),
        eta,
        lambda,
        gamma: store.get(hp.norm.gamma.unwrap()).value.data().to_vec(),
        beta: store.get(hp.norm.beta.unwrap()).value.data().to_vec(),
        delta: cfg.delta,
        eps: cfg.eps,
        ln_eps: LN_EPS,
        heads: cfg.heads,
    }
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst, mut instances, mut chained) = (0.0f64, 0, 0);
    while instances < 60 {
        let heads = rng.random_range(1..=3usize);
        let dh = rng.random_range(1..=8 / heads);
        let d = heads * dh;
        let (b, n) = (rng.random_range(1..=3usize), rng.random_range(1..=5usize));
        let scope = if instances % 2 == 0 { MemoryScope::PerForward } else { MemoryScope::PerEpisode };
        let cfg = HfwConfig {
            delta: rng.random_range(0.05..2.0),
            memory_scope: scope,
            ..HfwConfig::new(d, heads)
        };
        let seed = rng.random::<u64>();
        let (store, hp) = random_module(seed, &cfg);
        let ow = oracle_weights(&store, &hp, &cfg);
        let x1 = rand_tensor(seed, "x1", &[b, n, d], 2.0);
        let x2 = rand_tensor(seed, "x2", &[b, n, d], 2.0);

        let mut g = Graph::inference();
        let p = store.bind(&mut g);
        let v1 = g.constant(x1.clone());
        let (y1, mem) = hfw_forward(&mut g, &p, &hp, &cfg, v1, FastMemory::zeroed()).map_err(|e| e.to_string())?;
        let v2 = g.constant(x2.clone());
        let (y2, _) = hfw_forward(&mut g, &p, &hp, &cfg, v2, mem).map_err(|e| e.to_string())?;

        let (o1, m1) = oracle_forward(&nested(&x1), &ow, None);
        let m_graph = memory_of(g.value(mem.var().unwrap()));
        let m_err = m1
            .iter()
            .flatten()
            .flatten()
            .flatten()
            .zip(m_graph.iter().flatten().flatten().flatten())
            .map(|(a, c)| (a - c).abs())
            .fold(0.0, f64::max);
        let carried = (scope == MemoryScope::PerEpisode).then_some(&m1);
        chained += carried.is_some() as usize;
        let (o2, _) = oracle_forward(&nested(&x2), &ow, carried);
        let err = max_diff(&o1, &nested(g.value(y1))).max(max_diff(&o2, &nested(g.value(y2)))).max(m_err);
        worst = worst.max(err);
        instances += 1;
    }
    ensure(worst <= 1e-10, || format!("max abs diff {worst:.3e} over {instances} instances"))?;
    within(start.elapsed(), Duration::from_secs(10), "oracle")?;
    Ok(format!(
        "{instances} instances ({chained} with carried memory), max abs diff {worst:.2e}, {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut checks = 0;
    let mut worst = 0.0f64;
    for name in ["desk_vit_hebbian", "desk_swin_hebbian"] {
        let cfg = preset(name, 16).map_err(|e| e.to_string())?;
        for entry in run_suite(&cfg, 20).map_err(|e| e.to_string())? {
            ensure(entry.passed, || format!("{name}/{}: rel err {:.2e} at {}", entry.name, entry.max_rel_err, entry.worst))?;
            worst = worst.max(entry.max_rel_err);
            checks += 1;
        }
    }
    // the checker itself must flag a gradient that disagrees with the function
    let control = grad_check(
        |g, v| {
            let y = if g.is_tracking() { g.scale(v[0], 1.5) } else { g.scale(v[0], 1.0) };
            Ok(g.sum_all(y))
        },
        &[("x", rand_tensor(1, "x", &[3], 1.0))],
        1e-4,
    )
    .map_err(|e| e.to_string())?;
    ensure(!control.passed(), || "negative control passed".into())?;
    within(start.elapsed(), Duration::from_secs(120), "gradient suite")?;
    Ok(format!(
        "{checks} checks x 20 seeds on flat and hierarchical, max rel err {worst:.2e}, negative control rejected, {:.1}s",
        start.elapsed().as_secs_f64()
    ))
}

fn frob(t: &[f64]) -> f64 {
    t.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn memory_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut writes = 0;
    let mut max_norm = 0.0f64;
    for seq in 0..1000u64 {
        let heads = rng.random_range(1..=3usize);
        let dh = rng.random_range(1..=4usize);
        let n = rng.random_range(1..=6usize);
        let b = rng.random_range(1..=2usize);
        let cfg = HfwConfig {
            delta: rng.random_range(0.01..3.0),
            eps: 10f64.powf(rng.random_range(-8.0..-2.0)),
            ..HfwConfig::new(heads * dh, heads)
        };
        let mut g = Graph::<f64>::inference();
        let (el, ll) = (rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
        let (eta, lambda) = plasticity_from_logits(el, ll, cfg.eta_max);
        let eta_v = g.constant(Tensor::scalar(eta));
        let lambda_v = g.constant(Tensor::scalar(lambda));
        let mut mem = FastMemory::zeroed();
        for step in 0..rng.random_range(1..=8u64) {
            let scale = 10f64.powf(rng.random_range(-2.0..2.0));
            let k = g.constant(rand_tensor(seq * 31 + step, "k", &[b, heads, n, dh], scale));
            let v = g.constant(rand_tensor(seq * 31 + step, "v", &[b, heads, n, dh], scale));
            let a = associate(&mut g, k, v, &cfg).map_err(|e| e.to_string())?;
            let av = g.value(a).data();
            ensure(av.iter().all(|x| x.abs() <= cfg.delta), || format!("sequence {seq}: association outside ±δ"))?;
            mem = memory_write(&mut g, mem, a, eta_v, lambda_v, &cfg).map_err(|e| e.to_string())?;
            for slice in g.value(mem.var().unwrap()).data().chunks(dh * dh) {
                let norm = frob(slice);
                ensure(norm < 1.0, || format!("sequence {seq}: ‖M‖ = {norm}"))?;
                max_norm = max_norm.max(norm);
            }
            writes += 1;
        }
    }
    for i in 0..=400 {
        let l = -20.0 + 0.1 * i as f64;
        for eta_max in [0.5, 1.0, 3.0] {
            let (eta, lambda) = plasticity_from_logits(l, l, eta_max);
            ensure(eta > 0.0 && eta < eta_max && lambda > 0.0 && lambda < 1.0, || format!("logit {l}: η {eta}, λ {lambda}"))?;
        }
    }
    // permuting the tokens permutes the output rows
    let mut perm_err = 0.0f64;
    for seed in 0..50u64 {
        let cfg = HfwConfig::new(6, 2);
        let (store, hp) = random_module(seed, &cfg);
        let n = 5;
        let x = rand_tensor(seed, "x", &[2, n, 6], 2.0);
        let mut order: Vec<usize> = (0..n).collect();
        order.rotate_left(1 + seed as usize % (n - 1));
        order.swap(0, n - 1);
        let mut px = Vec::new();
        for bi in 0..2 {
            for &t in &order {
                let at = (bi * n + t) * 6;
                px.extend_from_slice(&x.data()[at..at + 6]);
            }
        }
        let px = Tensor::new(&[2, n, 6], px).unwrap();
        let run = |t: &Tensor<f64>| {
            let mut g = Graph::inference();
            let p = store.bind(&mut g);
            let v = g.constant(t.clone());
            let (y, _) = hfw_forward(&mut g, &p, &hp, &cfg, v, FastMemory::zeroed()).unwrap();
            g.value(y).clone()
        };
        let (y, py) = (run(&x), run(&px));
        for bi in 0..2 {
            for (i, &t) in order.iter().enumerate() {
                for c in 0..6 {
                    let d = (py.data()[(bi * n + i) * 6 + c] - y.data()[(bi * n + t) * 6 + c]).abs();
                    perm_err = perm_err.max(d);
                }
            }
        }
    }
    ensure(perm_err <= 1e-10, || format!("permutation error {perm_err:.2e}"))?;
    Ok(format!(
        "1000 sequences / {writes} writes, max ‖M‖ {max_norm:.10}, A within ±δ, η and λ open-interval, permutation error {perm_err:.1e}"
    ))
}

fn lifetime() -> Outcome {
    let life = memory_lifetime(0.880).map_err(|e| e.to_string())?;
    ensure((life - 8.33).abs() <= 0.01, || format!("lifetime {life}"))?;
    ensure(memory_lifetime(1.0).is_err(), || "λ = 1 accepted".into())?;
    Ok(format!("memory_lifetime(0.880) = {life:.4}"))
}

fn checkpoint_contract() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut n_models = 0;
    for name in ["desk_vit_hebbian", "desk_swin_hebbian"] {
        let mut cfg = preset(name, 16).map_err(|e| e.to_string())?;
        cfg.hfw_mut().unwrap().memory_scope = MemoryScope::PerEpisode;
        let model = Model::<f64>::new(cfg.clone(), 9).map_err(|e| e.to_string())?;
        let meta = CheckpointMeta {
            model: cfg,
            config_digest: digest(name),
            epoch: 1,
            best_val_acc: 0.0,
            seed: 9,
        };
        let before = encode(&model, &meta).map_err(|e| e.to_string())?;
        // run episodes that write the fast memory, then encode again
        for seed in 0..3 {
            let mut g = Graph::inference();
            let p = model.bind(&mut g);
            let s = g.constant(rand_tensor(seed, "s", &[4, 3, 16, 16], 2.0));
            let q = g.constant(rand_tensor(seed, "q", &[4, 3, 16, 16], 2.0));
            episode_forward(&model, &mut g, &p, s, &[0, 0, 1, 1], q, &[0, 1, 1, 0], 2).map_err(|e| e.to_string())?;
        }
        let after = encode(&model, &meta).map_err(|e| e.to_string())?;
        ensure(before == after, || format!("{name}: checkpoint changed after episodes"))?;

        let path = dir.path().join(format!("{name}.hfwckpt"));
        save_checkpoint(&model, &meta, &path).map_err(|e| e.to_string())?;
        let (back, _) = load_checkpoint::<f64>(&path).map_err(|e| e.to_string())?;
        let x = rand_tensor(42, "x", &[3, 3, 16, 16], 2.0);
        let (a, b) = (model.embed_images(&x).unwrap(), back.embed_images(&x).unwrap());
        ensure(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()), || {
            format!("{name}: reloaded forward differs")
        })?;

        let step = (after.len() / 200).max(1);
        for i in (0..after.len()).step_by(step) {
            let mut bad = after.clone();
            bad[i] ^= 0x10;
            ensure(matches!(decode(&bad), Err(AppError::Format(_))), || format!("{name}: flipped byte {i} accepted"))?;
        }
        ensure(decode(&after[..after.len() - 1]).is_err(), || "truncated file accepted".into())?;
        n_models += 1;
    }
    Ok(format!("{n_models} models bit-exact after reload, tensors unchanged by episodes, flipped bytes and truncation rejected"))
}

fn split_counts() -> Outcome {
    let ids: Vec<usize> = (0..1623).collect();
    let s = split_classes(&ids, [0.8, 0.1, 0.1], 0).map_err(|e| e.to_string())?;
    ensure(s.sizes() == (1298, 163, 162), || format!("sizes {:?}", s.sizes()))?;
    for seed in 0..100 {
        let s = split_classes(&ids, [0.8, 0.1, 0.1], seed).map_err(|e| e.to_string())?;
        let mut all: Vec<usize> = [Partition::Train, Partition::Val, Partition::Test]
            .iter()
            .flat_map(|&p| s.get(p).to_vec())
            .collect();
        all.sort_unstable();
        ensure(all == ids, || format!("seed {seed}: split not a partition"))?;
        ensure(s.sizes() == (1298, 163, 162), || format!("seed {seed}: sizes {:?}", s.sizes()))?;
    }
    Ok("(1298, 163, 162); disjoint and exhaustive over 100 seeds".into())
}

fn count(name: &str, target: usize) -> Result<usize, String> {
    let cfg = preset(name, target).map_err(|e| e.to_string())?;
    Ok(Model::<f32>::new(cfg, 0).map_err(|e| e.to_string())?.count_parameters())
}

fn parameter_counts() -> Outcome {
    let mut notes = Vec::new();
    for (name, reference) in [("vit_s16", 21.7e6), ("deit_s16", 21.7e6), ("swin_tiny", 27.5e6)] {
        for target in [84, 224] {
            let n = count(name, target)?;
            let rel = n as f64 / reference - 1.0;
            ensure(rel.abs() <= 0.05, || format!("{name}@{target}: {n} is {:+.1}%", rel * 100.0))?;
            if target == 84 {
                notes.push(format!("{name} {:.2}M", n as f64 / 1e6));
            }
        }
    }
    // hand audit at 28 px (32 px padded): d = 64, 16 tokens for the flat model
    // flat: patch 192·64+64, pos 16·64, 2 blocks of 49 984, final norm 128
    // hier: embed 12·32+32+64, stage 32 blocks 12 704, merge 256+128·64,
    //       stage 64 blocks 49 984, final norm 128
    // hfw module: 4·64² + 2·64 + 2 = 16 514
    let audits = [
        ("desk_vit", 113_472),
        ("desk_deit", 113_472),
        ("desk_vit_hebbian", 113_472 + 2 * 16_514),
        ("desk_swin", 134_432),
        ("desk_swin_hebbian", 134_432 + 16_514),
    ];
    for (name, expect) in audits {
        let n = count(name, 28)?;
        ensure(n == expect, || format!("{name}: {n} != audit {expect}"))?;
    }
    notes.push("desk presets match the hand audit".into());
    Ok(notes.join(", "))
}

fn configs_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

fn smoke_training() -> Outcome {
    let start = Instant::now();
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut results = Vec::new();
    for name in ["desk_vit", "desk_vit_hebbian"] {
        let t = Instant::now();
        let mut cfg = ExperimentConfig::load(&configs_dir().join(format!("{name}.toml"))).map_err(|e| e.to_string())?;
        cfg.output_dir = out.path().to_path_buf();
        Overrides { deterministic: true, ..Overrides::default() }
            .apply(&mut cfg, Partition::Train)
            .map_err(|e| e.to_string())?;
        let report = cmd_train(&cfg, &mut Silent).map_err(|e| e.to_string())?;
        let o = &report.outcome;
        ensure(o.epochs_run == 10 && cfg.episodes.train == 50, || format!("{name}: {} epochs run", o.epochs_run))?;
        let eta_max = cfg.model_config().unwrap().hfw().map(|h| h.eta_max);
        results.push((name, o.best_val_acc, report.plasticity.clone(), eta_max, t.elapsed()));
    }
    let mut lines = Vec::new();
    for (name, acc, _, _, t) in &results {
        lines.push(format!("{name} {acc:.3} ({:.0}s)", t.as_secs_f64()));
    }
    let detail = lines.join(", ");
    for (name, acc, ..) in &results {
        ensure(*acc >= 0.90, || format!("{name} val acc {acc:.3} < 0.90; {detail}"))?;
    }
    let (_, base, ..) = results[0];
    let (_, hebb, ref plast, eta_max, _) = results[1];
    let init = plasticity_from_logits(ETA_LOGIT_INIT, 0.0, eta_max.unwrap()).0;
    ensure(!plast.is_empty() && plast.iter().all(|(eta, _)| (eta - init).abs() > 1e-6), || {
        format!("η did not move from {init:.5}: {plast:?}")
    })?;
    ensure((hebb - base).abs() <= 0.05, || format!("gap {:+.3} exceeds 5 points; {detail}", hebb - base))?;
    within(start.elapsed(), Duration::from_secs(15 * 60), "smoke training")?;
    let etas: Vec<String> = plast.iter().map(|(e, _)| format!("{e:.4}")).collect();
    Ok(format!("{detail}; learned η [{}] vs init {init:.4}", etas.join(", ")))
}

fn gate_ablation() -> Outcome {
    let mut worst = 0.0f64;
    for name in ["desk_vit_hebbian", "desk_swin_hebbian"] {
        let mut closed: ModelConfig = preset(name, 28).map_err(|e| e.to_string())?;
        closed.hfw_mut().unwrap().gate = GateMode::Closed;
        let disabled = closed.without_hfw();
        let x = rand_tensor(3, "x", &[4, 3, 32, 32], 2.0);
        for seed in 0..3 {
            let a = Model::<f64>::new(closed.clone(), seed).unwrap().embed_images(&x).unwrap();
            let b = Model::<f64>::new(disabled.clone(), seed).unwrap().embed_images(&x).unwrap();
            let d = a.max_abs_diff(&b);
            ensure(d <= 1e-6, || format!("{name} seed {seed}: diff {d:.2e}"))?;
            worst = worst.max(d);
        }
    }
    Ok(format!("flat and hierarchical, max embedding diff {worst:.1e}"))
}

/// Records episode shapes of the training loop.
#[derive(Default)]
struct ShapeAudit {
    episodes: usize,
    bad: Vec<String>,
}

impl Observer for ShapeAudit {
    fn train_episode(&mut self, _epoch: usize, index: usize, support: &[usize], query: &[usize], _loss: f64) {
        self.episodes += 1;
        if support[0] != 5 || query[0] != 75 {
            self.bad.push(format!("episode {index}: support {support:?}, query {query:?}"));
        }
    }
}

fn protocol_conformance() -> Outcome {
    let start = Instant::now();
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    // default protocol with Omniglot-sized synthetic data standing in for the
    // archive, and the desk model to keep the epoch short
    let text = format!(
        "schema_version = 1\noutput_dir = \"{}\"\n[model]\npreset = \"desk_vit_hebbian\"\n\
         [data]\nsource = \"synth\"\n[data.preprocess]\ntarget = 28\n\
         [data.synth]\nclasses = 1623\nper_class = 20\n[episodes]\nval = 20\ntest = 20\n",
        out.path().display()
    );
    let mut cfg = ExperimentConfig::from_toml(&text).map_err(|e| e.to_string())?;
    Overrides { epochs: Some(1), deterministic: true, ..Overrides::default() }
        .apply(&mut cfg, Partition::Train)
        .map_err(|e| e.to_string())?;
    let e = &cfg.episodes;
    ensure((e.n_way, e.k_shot, e.n_query, e.train) == (5, 1, 15, 600), || format!("episodes {e:?}"))?;

    let mut audit = ShapeAudit::default();
    let report = cmd_train(&cfg, &mut audit).map_err(|e| e.to_string())?;
    ensure(audit.episodes == 600, || format!("{} train episodes", audit.episodes))?;
    ensure(audit.bad.is_empty(), || audit.bad[..audit.bad.len().min(3)].join("; "))?;
    ensure(report.outcome.epochs_run == 1, || format!("{} epochs", report.outcome.epochs_run))?;

    let rows = cmd_ablate(&report.checkpoint, &cfg, &DEFAULT_K).map_err(|e| e.to_string())?;
    let ks: Vec<usize> = rows.iter().map(|r| r.k_shot).collect();
    ensure(ks == [1, 3, 5, 10], || format!("ablation K {ks:?}"))?;
    let queries: Vec<usize> = rows.iter().map(|r| r.n_query).collect();
    // 20-image classes leave 10 queries at K = 10
    for r in &rows {
        ensure(r.n_query == 15.min(20 - r.k_shot), || format!("K = {}: {} queries", r.k_shot, r.n_query))?;
        ensure(r.metrics.episodes == cfg.episodes.test, || format!("K = {}: {} episodes", r.k_shot, r.metrics.episodes))?;
    }
    Ok(format!(
        "600 train episodes of support 5xK / query 75, ablation K {ks:?} with queries {queries:?}, {:.0}s",
        start.elapsed().as_secs_f64()
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("hfw oracle equivalence", oracle_equivalence),
        ("gradient suite", gradient_suite),
        ("memory invariants", memory_invariants),
        ("memory lifetime", lifetime),
        ("checkpoint contract", checkpoint_contract),
        ("split counts", split_counts),
        ("parameter counts", parameter_counts),
        ("smoke training", smoke_training),
        ("gate ablation equivalence", gate_ablation),
        ("protocol conformance", protocol_conformance),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
