//! Command implementations shared by the binary and the tests.

use std::fs;
use std::path::{Path, PathBuf};

use hfw_core::backbones::Model;
use hfw_core::fewshot::{split_classes, summarize, ClassSplit, Partition};
use hfw_core::Element;
use serde::Serialize;

use crate::checkpoint::{self, digest, CheckpointMeta};
use crate::config::{DataSource, ExperimentConfig, Precision, SynthSection};
use crate::data::{load_omniglot, ingest_omniglot, read_pack, synth_glyphs, write_pack, CharacterDataset, OMNIGLOT_PACK};
use crate::error::{AppError, Result};
use crate::gradcheck::{run_suite, CheckEntry};
use crate::metrics::{write_csv, MetricsRow};
use crate::train::{evaluate, train_loop, Observer, TrainOutcome, TrainSettings, STREAM_TEST, STREAM_VAL};
use crate::data::derive_seed;

pub const SYNTH_PACK: &str = "synth.pack";
pub const CONFIG_SNAPSHOT: &str = "config.resolved.toml";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const BEST_CHECKPOINT: &str = "best.hfwckpt";
pub const DEFAULT_K: [usize; 4] = [1, 3, 5, 10];

/// Command-line values that replace configuration fields.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub episodes: Option<usize>,
    pub epochs: Option<usize>,
    pub threads: Option<usize>,
    pub deterministic: bool,
}

impl Overrides {
    /// Applies the overrides; `--episodes` sets the count of the phase being run.
    pub fn apply(&self, cfg: &mut ExperimentConfig, phase: Partition) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.episodes {
            match phase {
                Partition::Train => cfg.episodes.train = e,
                Partition::Val => cfg.episodes.val = e,
                Partition::Test => cfg.episodes.test = e,
            }
        }
        if let Some(e) = self.epochs {
            cfg.schedule.total_epochs = e;
            // a short run keeps at least one post-warmup epoch
            cfg.schedule.warmup_epochs = cfg.schedule.warmup_epochs.min(e.saturating_sub(1));
        }
        if let Some(t) = self.threads {
            cfg.runtime.threads = t;
        }
        cfg.runtime.deterministic |= self.deterministic;
        cfg.validate()
    }
}

fn parallel(cfg: &ExperimentConfig) -> bool {
    !cfg.runtime.deterministic && cfg.runtime.threads != 1
}

/// Runs `f` on a pool sized by the runtime settings.
fn with_pool<R: Send>(cfg: &ExperimentConfig, f: impl FnOnce() -> R + Send) -> R {
    let threads = if cfg.runtime.deterministic { 1 } else { cfg.runtime.threads };
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<CharacterDataset> {
    match cfg.data.source {
        DataSource::Synth => {
            let s = &cfg.data.synth;
            synth_glyphs(s.classes, s.per_class, s.extent, s.seed)
        }
        DataSource::Omniglot => load_omniglot(&cfg.data_root()),
    }
}

pub fn class_split(cfg: &ExperimentConfig, ds: &CharacterDataset) -> Result<ClassSplit> {
    Ok(split_classes(&ds.class_ids(), cfg.data.split, cfg.seed)?)
}

#[derive(Clone, Debug, Serialize)]
pub struct PrepareSummary {
    pub cache: PathBuf,
    pub classes: usize,
    pub images: usize,
    pub split: (usize, usize, usize),
    pub up_to_date: bool,
}

impl std::fmt::Display for PrepareSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.up_to_date {
            writeln!(f, "cache up to date: {}", self.cache.display())?;
        } else {
            writeln!(f, "wrote {}", self.cache.display())?;
        }
        write!(
            f,
            "{} classes / {} images; split {}/{}/{}",
            self.classes, self.images, self.split.0, self.split.1, self.split.2
        )
    }
}

/// Builds the packed image cache under `root` from Omniglot trees or, with
/// `synth`, from generated glyphs. An existing matching cache is left alone.
pub fn cmd_prepare_data(root: &Path, synth: Option<&SynthSection>, ratios: [f64; 3], seed: u64) -> Result<PrepareSummary> {
    let (path, meta) = match synth {
        Some(s) => (
            root.join(SYNTH_PACK),
            serde_json::json!({"source": "synth", "classes": s.classes, "per_class": s.per_class,
                               "extent": s.extent, "seed": s.seed}),
        ),
        None => (root.join(OMNIGLOT_PACK), serde_json::json!({"source": "omniglot"})),
    };
    let existing = if path.is_file() {
        match read_pack(&path) {
            Ok((ds, m)) if m == meta => Some(ds),
            Ok(_) => None,
            Err(e) => {
                eprintln!("warning: rebuilding unreadable cache {}: {e}", path.display());
                None
            }
        }
    } else {
        None
    };
    let up_to_date = existing.is_some();
    let ds = match existing {
        Some(ds) => ds,
        None => {
            let ds = match synth {
                Some(s) => synth_glyphs(s.classes, s.per_class, s.extent, s.seed)?,
                None => ingest_omniglot(root)?,
            };
            write_pack(&ds, &meta, &path)?;
            ds
        }
    };
    let split = split_classes(&ds.class_ids(), ratios, seed)?;
    Ok(PrepareSummary {
        cache: path,
        classes: ds.len(),
        images: ds.image_count(),
        split: split.sizes(),
        up_to_date,
    })
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub outcome: TrainOutcome,
    pub plasticity: Vec<(f64, f64)>,
}

pub fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join(cfg.run_id())
}

pub fn train_settings(cfg: &ExperimentConfig, checkpoint: Option<(PathBuf, String)>) -> TrainSettings {
    TrainSettings {
        run_id: cfg.run_id(),
        seed: cfg.seed,
        episode: cfg.episodes.episode_config(),
        train_episodes: cfg.episodes.train,
        val_episodes: cfg.episodes.val,
        preprocess: cfg.data.preprocess.clone(),
        optim: cfg.optim.clone(),
        schedule: cfg.schedule.schedule(),
        patience: cfg.schedule.patience,
        parallel_eval: parallel(cfg),
        record_wall: !cfg.runtime.deterministic,
        checkpoint,
    }
}

/// Trains from scratch, writing the config snapshot, metrics and the best
/// checkpoint into `output_dir/run_id`.
pub fn cmd_train(cfg: &ExperimentConfig, observer: &mut (dyn Observer + Send)) -> Result<TrainReport> {
    match cfg.precision {
        Precision::F32 => train_as::<f32>(cfg, observer),
        Precision::F64 => train_as::<f64>(cfg, observer),
    }
}

fn train_as<T: Element>(cfg: &ExperimentConfig, observer: &mut (dyn Observer + Send)) -> Result<TrainReport> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let split = class_split(cfg, &ds)?;
    let dir = run_dir(cfg);
    fs::create_dir_all(&dir).map_err(|e| AppError::io(&dir, e))?;
    let snapshot = cfg.to_toml();
    let snap_path = dir.join(CONFIG_SNAPSHOT);
    fs::write(&snap_path, &snapshot).map_err(|e| AppError::io(&snap_path, e))?;
    let ckpt = dir.join(BEST_CHECKPOINT);
    // a stale checkpoint from an earlier run must not survive as "best"
    if ckpt.exists() {
        fs::remove_file(&ckpt).map_err(|e| AppError::io(&ckpt, e))?;
    }
    let mut model = Model::<T>::new(cfg.model_config()?, cfg.seed)?;
    let settings = train_settings(cfg, Some((ckpt.clone(), digest(&snapshot))));
    let outcome = with_pool(cfg, || train_loop(&mut model, &ds, &split, &settings, observer))?;
    write_csv(&outcome.history, &dir.join(METRICS_CSV))?;
    write_json(&outcome.history, &dir.join(METRICS_JSON))?;
    Ok(TrainReport {
        run_dir: dir,
        checkpoint: ckpt,
        plasticity: model.plasticity(),
        outcome,
    })
}

fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| AppError::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| AppError::io(path, e))
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub row: MetricsRow,
    pub k_shot: usize,
    pub checkpoint_epoch: usize,
    pub checkpoint_val_acc: f64,
}

/// Seed of the evaluation episodes for a partition and shot count.
pub fn eval_seed(seed: u64, split: Partition, k_shot: usize) -> u64 {
    match split {
        // validation episodes are the ones training selected on
        Partition::Val => derive_seed(&[seed, STREAM_VAL]),
        _ => derive_seed(&[seed, STREAM_TEST, k_shot as u64]),
    }
}

fn load_for<T: Element>(path: &Path, cfg: &ExperimentConfig) -> Result<(Model<T>, CheckpointMeta)> {
    let (model, meta) = checkpoint::load_checkpoint::<T>(path)?;
    let expected = cfg.model_config()?;
    if &expected != model.config() {
        return Err(AppError::Config(format!(
            "checkpoint {} holds model '{}' which does not match configured preset '{}'",
            path.display(),
            model.config().name,
            expected.name
        )));
    }
    Ok((model, meta))
}

/// Evaluates a checkpoint on `split` at the configured shot count.
pub fn cmd_eval(checkpoint: &Path, cfg: &ExperimentConfig, split: Partition) -> Result<EvalReport> {
    match cfg.precision {
        Precision::F32 => eval_as::<f32>(checkpoint, cfg, split),
        Precision::F64 => eval_as::<f64>(checkpoint, cfg, split),
    }
}

fn eval_as<T: Element>(checkpoint: &Path, cfg: &ExperimentConfig, split: Partition) -> Result<EvalReport> {
    let (model, meta) = load_for::<T>(checkpoint, cfg)?;
    let ds = load_dataset(cfg)?;
    let classes = class_split(cfg, &ds)?;
    let episodes = match split {
        Partition::Val => cfg.episodes.val,
        _ => cfg.episodes.test,
    };
    let (_, row) = eval_rows(&model, &ds, classes.get(split), cfg, split, &[cfg.episodes.k_shot], episodes, false)?.remove(0);
    Ok(EvalReport {
        row,
        k_shot: cfg.episodes.k_shot,
        checkpoint_epoch: meta.epoch,
        checkpoint_val_acc: meta.best_val_acc,
    })
}

#[allow(clippy::too_many_arguments)]
fn eval_rows<T: Element>(
    model: &Model<T>,
    ds: &CharacterDataset,
    classes: &[usize],
    cfg: &ExperimentConfig,
    split: Partition,
    ks: &[usize],
    episodes: usize,
    cap_queries: bool,
) -> Result<Vec<(usize, MetricsRow)>> {
    let min_len = classes.iter().map(|&c| ds.class_len(c)).min().unwrap_or(0);
    ks.iter()
        .map(|&k| {
            let mut n_query = cfg.episodes.n_query;
            if cap_queries {
                // 20-image classes cannot hold 10 shots plus 15 queries
                n_query = n_query.min(min_len.saturating_sub(k));
            }
            if k == 0 || n_query == 0 || k + n_query > min_len {
                return Err(AppError::Core(hfw_core::Error::Argument(format!(
                    "K = {k} infeasible: classes hold {min_len} images and episodes use {n_query} queries"
                ))));
            }
            let mut ep = cfg.episodes.episode_config();
            ep.k_shot = k;
            ep.n_query = n_query;
            let start = std::time::Instant::now();
            let m = with_pool(cfg, || {
                evaluate(
                    model,
                    ds,
                    classes,
                    &ep,
                    &cfg.data.preprocess,
                    episodes,
                    eval_seed(cfg.seed, split, k),
                    parallel(cfg),
                )
            })?;
            let wall = if cfg.runtime.deterministic { 0.0 } else { start.elapsed().as_secs_f64() };
            let row = MetricsRow::new(
                &cfg.run_id(),
                0,
                split.name(),
                &summarize(&m)?,
                0.0,
                &model.plasticity(),
                wall,
            );
            Ok((n_query, row))
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub model: String,
    pub k_shot: usize,
    /// Queries per class; below the configured count when a class is too small.
    pub n_query: usize,
    #[serde(flatten)]
    pub metrics: MetricsRow,
}

/// Evaluates the checkpoint on the test split once per shot count.
///
/// Query counts shrink where `K` plus the configured queries exceed the
/// smallest test class.
pub fn cmd_ablate(checkpoint: &Path, cfg: &ExperimentConfig, ks: &[usize]) -> Result<Vec<AblationRow>> {
    match cfg.precision {
        Precision::F32 => ablate_as::<f32>(checkpoint, cfg, ks),
        Precision::F64 => ablate_as::<f64>(checkpoint, cfg, ks),
    }
}

fn ablate_as<T: Element>(checkpoint: &Path, cfg: &ExperimentConfig, ks: &[usize]) -> Result<Vec<AblationRow>> {
    if ks.is_empty() {
        return Err(AppError::Config("empty K list".into()));
    }
    let (model, _) = load_for::<T>(checkpoint, cfg)?;
    let ds = load_dataset(cfg)?;
    let split = class_split(cfg, &ds)?;
    let rows = eval_rows(&model, &ds, split.get(Partition::Test), cfg, Partition::Test, ks, cfg.episodes.test, true)?;
    Ok(ks
        .iter()
        .zip(rows)
        .map(|(&k, (n_query, metrics))| AblationRow {
            model: cfg.model.preset.clone(),
            k_shot: k,
            n_query,
            metrics,
        })
        .collect())
}

/// Ablation table: one row per K.
pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| AppError::Format(e.to_string());
    w.write_record([
        "model",
        "k_shot",
        "n_query",
        "episodes",
        "acc_mean",
        "acc_ci95",
        "precision_macro",
        "recall_macro",
        "f1_macro",
        "loss_mean",
    ])
    .map_err(fail)?;
    for r in rows {
        let m = &r.metrics;
        w.write_record([
            r.model.clone(),
            r.k_shot.to_string(),
            r.n_query.to_string(),
            m.episodes.to_string(),
            m.acc_mean.to_string(),
            m.acc_ci95.map(|c| c.to_string()).unwrap_or_default(),
            m.precision_macro.to_string(),
            m.recall_macro.to_string(),
            m.f1_macro.to_string(),
            m.loss_mean.to_string(),
        ])
        .map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| AppError::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf-8 fields"))
}

pub fn write_eval_json(report: &EvalReport, path: &Path) -> Result<()> {
    write_json(report, path)
}

pub fn write_ablation(rows: &[AblationRow], path: &Path) -> Result<()> {
    fs::write(path, ablation_csv(rows)?).map_err(|e| AppError::io(path, e))
}

/// Finite-difference suite for the preset's architecture family.
pub fn cmd_gradcheck(preset: &str, seeds: u64) -> Result<Vec<CheckEntry>> {
    let cfg = hfw_core::backbones::presets::preset(preset, 28)?;
    Ok(run_suite(&cfg, seeds)?)
}
