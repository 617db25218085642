//! Episodic optimization loop: per-episode forward, clipped AdamW steps,
//! validation after every epoch, best-model tracking and early stopping.

use std::path::PathBuf;
use std::time::Instant;

use hfw_core::backbones::Model;
use hfw_core::fewshot::{
    episode_metrics, sample_episode, summarize, ClassSplit, Episode, EpisodeConfig, EpisodeMetrics, MetricsSummary,
    Partition,
};
use hfw_core::optim::{adamw_step, clip_grads, collect_grads, lr_at, AdamWConfig, OptimizerState, ScheduleConfig};
use hfw_core::protonet::episode_forward;
use hfw_core::{Element, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::data::{derive_seed, image_batch, CharacterDataset, PreprocessConfig};
use crate::error::{AppError, Result};
use crate::metrics::MetricsRow;

/// Stream tags keeping train, validation and test draws independent.
pub const STREAM_TRAIN: u64 = 1;
pub const STREAM_VAL: u64 = 2;
pub const STREAM_TEST: u64 = 3;

#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub run_id: String,
    pub seed: u64,
    pub episode: EpisodeConfig,
    pub train_episodes: usize,
    pub val_episodes: usize,
    pub preprocess: PreprocessConfig,
    pub optim: AdamWConfig,
    pub schedule: ScheduleConfig,
    pub patience: usize,
    /// Evaluate validation episodes on the rayon pool.
    pub parallel_eval: bool,
    /// Write measured wall time into the history; off for byte-reproducible output.
    pub record_wall: bool,
    /// Where to write the best checkpoint, with the config digest to record.
    pub checkpoint: Option<(PathBuf, String)>,
}

/// Hooks for progress reporting and protocol audits.
pub trait Observer {
    fn train_episode(&mut self, _epoch: usize, _index: usize, _support_shape: &[usize], _query_shape: &[usize], _loss: f64) {}
    fn epoch_end(&mut self, _train: &MetricsRow, _val: &MetricsRow) {}
}

pub struct Silent;

impl Observer for Silent {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<MetricsRow>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

/// An episode's images, ready for the model.
pub struct EpisodeBatch<T> {
    pub episode: Episode,
    pub support: Tensor<T>,
    pub query: Tensor<T>,
}

/// Samples episode `seed` from `classes` and preprocesses its images.
pub fn episode_batch<T: Element>(
    model: &Model<T>,
    ds: &CharacterDataset,
    classes: &[usize],
    cfg: &EpisodeConfig,
    pre: &PreprocessConfig,
    train_mode: bool,
    seed: u64,
) -> Result<EpisodeBatch<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let episode = sample_episode(classes, |c| ds.class_len(c), cfg, &mut rng)?;
    let extent = model.image_size();
    let support = image_batch(ds, &episode.support, pre, train_mode, derive_seed(&[seed, 1]), extent)?;
    let query = image_batch(ds, &episode.query, pre, train_mode, derive_seed(&[seed, 2]), extent)?;
    Ok(EpisodeBatch { episode, support, query })
}

fn plasticity_text<T: Element>(model: &Model<T>) -> String {
    let p = model.plasticity();
    if p.is_empty() {
        return "no HFW modules".into();
    }
    let eta: Vec<String> = p.iter().map(|x| format!("{:.6}", x.0)).collect();
    let lambda: Vec<String> = p.iter().map(|x| format!("{:.6}", x.1)).collect();
    format!("eta [{}], lambda [{}]", eta.join(", "), lambda.join(", "))
}

/// Forward-only metrics of one episode on fresh memory.
pub fn eval_episode<T: Element>(model: &Model<T>, batch: &EpisodeBatch<T>, n_way: usize) -> Result<EpisodeMetrics> {
    let mut g = Graph::inference();
    let p = model.bind(&mut g);
    let s = g.constant(batch.support.clone());
    let q = g.constant(batch.query.clone());
    let ep = &batch.episode;
    let out = episode_forward(model, &mut g, &p, s, &ep.support_labels, q, &ep.query_labels, n_way)?;
    let loss = g.value(out.loss).item().as_f64();
    Ok(episode_metrics(&out.preds, &ep.query_labels, n_way, loss)?)
}

/// Evaluates `episodes` episodes from `classes`; episode `i` is drawn from
/// `derive_seed([seed, i])`, so results do not depend on scheduling.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<T: Element>(
    model: &Model<T>,
    ds: &CharacterDataset,
    classes: &[usize],
    cfg: &EpisodeConfig,
    pre: &PreprocessConfig,
    episodes: usize,
    seed: u64,
    parallel: bool,
) -> Result<Vec<EpisodeMetrics>> {
    let one = |i: usize| -> Result<EpisodeMetrics> {
        let batch = episode_batch(model, ds, classes, cfg, pre, false, derive_seed(&[seed, i as u64]))?;
        eval_episode(model, &batch, cfg.n_way)
    };
    if parallel {
        (0..episodes).into_par_iter().map(one).collect()
    } else {
        (0..episodes).map(one).collect()
    }
}

fn summary(m: &[EpisodeMetrics]) -> Result<MetricsSummary> {
    Ok(summarize(m)?)
}

/// Runs the schedule, keeping the parameters with the best validation
/// accuracy. On return `model` holds those parameters.
pub fn train_loop<T: Element>(
    model: &mut Model<T>,
    ds: &CharacterDataset,
    split: &ClassSplit,
    s: &TrainSettings,
    observer: &mut dyn Observer,
) -> Result<TrainOutcome> {
    s.schedule.validate()?;
    s.optim.validate()?;
    s.episode.validate()?;
    if s.patience == 0 || s.train_episodes == 0 || s.val_episodes == 0 {
        return Err(AppError::Config("patience and episode counts must be >= 1".into()));
    }
    let train_classes = split.get(Partition::Train);
    let val_classes = split.get(Partition::Val);
    let n_way = s.episode.n_way;
    let mut state = OptimizerState::new(model.params());
    let start = Instant::now();
    let wall = |t: &Instant| if s.record_wall { t.elapsed().as_secs_f64() } else { 0.0 };

    let mut history = Vec::new();
    let mut best: Option<(usize, f64, Vec<Tensor<T>>)> = None;
    let mut since_best = 0;
    let mut epochs_run = 0;
    let mut stopped_early = false;

    for epoch in 0..s.schedule.total_epochs {
        let lr = lr_at(epoch, &s.schedule, s.optim.lr)?;
        let mut train_metrics = Vec::with_capacity(s.train_episodes);
        for idx in 0..s.train_episodes {
            let seed = derive_seed(&[s.seed, STREAM_TRAIN, epoch as u64, idx as u64]);
            let batch = episode_batch(
                model,
                ds,
                train_classes,
                &s.episode,
                &s.preprocess,
                s.preprocess.augment,
                seed,
            )?;
            let abort = |what: &str, model: &Model<T>| {
                AppError::Numerical(format!(
                    "{what} at epoch {epoch}, episode {idx}; {}",
                    plasticity_text(model)
                ))
            };

            let mut g = Graph::new();
            let p = model.bind(&mut g);
            let sv = g.constant(batch.support.clone());
            let qv = g.constant(batch.query.clone());
            let ep = &batch.episode;
            let out = episode_forward(model, &mut g, &p, sv, &ep.support_labels, qv, &ep.query_labels, n_way)?;
            let loss = g.value(out.loss).item().as_f64();
            if !loss.is_finite() {
                return Err(abort("non-finite loss", model));
            }
            let mut grads = g.backward(out.loss)?;
            let mut gs = collect_grads(&mut grads, &p, model.params());
            clip_grads(&mut gs, s.optim.grad_clip)?;
            adamw_step(model.params_mut(), &gs, &mut state, &s.optim, lr).map_err(|e| match e {
                hfw_core::Error::Numerical(m) => abort(&m, model),
                other => other.into(),
            })?;
            observer.train_episode(epoch, idx, batch.support.shape(), batch.query.shape(), loss);
            train_metrics.push(episode_metrics(&out.preds, &ep.query_labels, n_way, loss)?);
        }
        let plasticity = model.plasticity();
        let train_row = MetricsRow::new(&s.run_id, epoch, "train", &summary(&train_metrics)?, lr, &plasticity, wall(&start));

        let val = evaluate(
            model,
            ds,
            val_classes,
            &s.episode,
            &s.preprocess,
            s.val_episodes,
            derive_seed(&[s.seed, STREAM_VAL]),
            s.parallel_eval,
        )?;
        let val_summary = summary(&val)?;
        let val_row = MetricsRow::new(&s.run_id, epoch, "val", &val_summary, lr, &plasticity, wall(&start));
        observer.epoch_end(&train_row, &val_row);
        history.push(train_row);
        history.push(val_row);
        epochs_run = epoch + 1;

        let improved = best.as_ref().is_none_or(|b| val_summary.acc_mean > b.1);
        if improved {
            let snapshot = model.params().iter().map(|p| p.value.clone()).collect();
            best = Some((epoch, val_summary.acc_mean, snapshot));
            since_best = 0;
            if let Some((path, digest)) = &s.checkpoint {
                let meta = CheckpointMeta {
                    model: model.config().clone(),
                    config_digest: digest.clone(),
                    epoch,
                    best_val_acc: val_summary.acc_mean,
                    seed: s.seed,
                };
                save_checkpoint(model, &meta, path)?;
            }
        } else {
            since_best += 1;
            if since_best >= s.patience {
                stopped_early = epoch + 1 < s.schedule.total_epochs;
                break;
            }
        }
    }

    let (best_epoch, best_val_acc, snapshot) = best.expect("at least one epoch ran");
    for (p, v) in model.params_mut().iter_mut().zip(snapshot) {
        p.value = v;
    }
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_acc,
        epochs_run,
        stopped_early,
    })
}
