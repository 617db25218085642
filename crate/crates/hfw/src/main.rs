use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hfw::commands::{
    cmd_ablate, cmd_eval, cmd_gradcheck, cmd_prepare_data, cmd_train, run_dir, write_ablation, write_eval_json,
    Overrides, DEFAULT_K,
};
use hfw::config::{ExperimentConfig, SynthSection};
use hfw::gradcheck::TOLERANCE;
use hfw::metrics::MetricsRow;
use hfw::train::Observer;
use hfw::{AppError, Result};
use hfw_core::fewshot::Partition;

#[derive(Parser)]
#[command(name = "hfw", version, about = "Hebbian fast-weight few-shot transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluation worker threads (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Single-threaded, byte-reproducible run.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Build the packed image cache and print dataset and split sizes.
    PrepareData {
        #[command(flatten)]
        common: Common,
        /// Data root (falls back to the config, then HFW_DATA_ROOT, then ./data).
        #[arg(long)]
        root: Option<PathBuf>,
        /// Generate this many synthetic glyph classes instead of reading Omniglot.
        #[arg(long)]
        synth: Option<usize>,
        #[arg(long, default_value_t = 20)]
        per_class: usize,
        #[arg(long, default_value_t = 28)]
        extent: usize,
    },
    /// Train a model; writes the config snapshot, metrics and best checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training episodes per epoch.
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        episodes: Option<usize>,
        /// Shots per class.
        #[arg(long)]
        k: Option<usize>,
        /// JSON result path (default: inside the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint at several shot counts.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        /// Comma-separated shot counts.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        /// CSV path (default: inside the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks for an architecture family.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Preset name; defaults to the configured model or desk_vit_hebbian.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| AppError::Config("--config is required".into()))?;
    ExperimentConfig::load(path)
}

fn overrides(common: &Common, episodes: Option<usize>, epochs: Option<usize>) -> Overrides {
    Overrides {
        seed: common.seed,
        episodes,
        epochs,
        threads: common.threads,
        deterministic: common.deterministic,
    }
}

struct Progress;

impl Observer for Progress {
    fn epoch_end(&mut self, train: &MetricsRow, val: &MetricsRow) {
        eprintln!(
            "epoch {:>3}  lr {:.2e}  train loss {:.4} acc {:.4}  val loss {:.4} acc {:.4}{}",
            train.epoch,
            train.lr,
            train.loss_mean,
            train.acc_mean,
            val.loss_mean,
            val.acc_mean,
            plasticity(&val.eta_values, &val.lambda_values)
        );
    }
}

fn plasticity(eta: &[f64], lambda: &[f64]) -> String {
    if eta.is_empty() {
        return String::new();
    }
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    format!("  eta [{}] lambda [{}]", fmt(eta), fmt(lambda))
}

fn print_row(row: &MetricsRow, k: usize) {
    let ci = row.acc_ci95.map_or("null".to_string(), |c| format!("{c:.4}"));
    println!(
        "{} {}-shot, {} episodes: acc {:.4} ± {}  precision {:.4}  recall {:.4}  f1 {:.4}  loss {:.4}{}",
        row.split,
        k,
        row.episodes,
        row.acc_mean,
        ci,
        row.precision_macro,
        row.recall_macro,
        row.f1_macro,
        row.loss_mean,
        plasticity(&row.eta_values, &row.lambda_values)
    );
}

fn out_path(out: &Option<PathBuf>, cfg: &ExperimentConfig, name: String) -> Result<PathBuf> {
    if let Some(p) = out {
        return Ok(p.clone());
    }
    let dir = run_dir(cfg);
    std::fs::create_dir_all(&dir).map_err(|e| AppError::io(&dir, e))?;
    Ok(dir.join(name))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareData {
            common,
            root,
            synth,
            per_class,
            extent,
        } => {
            let cfg = common.config.as_ref().map(|p| ExperimentConfig::load(p)).transpose()?;
            let root = match (root, &cfg) {
                (Some(r), _) => r,
                (None, Some(c)) => c.data_root(),
                (None, None) => std::env::var_os("HFW_DATA_ROOT").map_or_else(|| PathBuf::from("data"), PathBuf::from),
            };
            let seed = common.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(42);
            let ratios = cfg.as_ref().map_or([0.8, 0.1, 0.1], |c| c.data.split);
            let synth = synth.map(|classes| SynthSection {
                classes,
                per_class,
                extent,
                seed: cfg.as_ref().map_or(7, |c| c.data.synth.seed),
            });
            let summary = cmd_prepare_data(&root, synth.as_ref(), ratios, seed)?;
            println!("{summary}");
        }
        Command::Train { common, episodes, epochs } => {
            let mut cfg = load_config(&common)?;
            overrides(&common, episodes, epochs).apply(&mut cfg, Partition::Train)?;
            let report = cmd_train(&cfg, &mut Progress)?;
            let o = &report.outcome;
            println!(
                "best val acc {:.4} at epoch {} ({} epochs run{}); run dir {}",
                o.best_val_acc,
                o.best_epoch,
                o.epochs_run,
                if o.stopped_early { ", stopped early" } else { "" },
                report.run_dir.display()
            );
            for (i, (eta, lambda)) in report.plasticity.iter().enumerate() {
                let life = hfw_core::hfw::memory_lifetime(*lambda).map_or(f64::INFINITY, |l| l);
                println!("hfw[{i}] eta {eta:.5} lambda {lambda:.5} lifetime {life:.2}");
            }
        }
        Command::Eval {
            common,
            checkpoint,
            split,
            episodes,
            k,
            out,
        } => {
            let split = match split {
                SplitArg::Val => Partition::Val,
                SplitArg::Test => Partition::Test,
            };
            let mut cfg = load_config(&common)?;
            if let Some(k) = k {
                cfg.episodes.k_shot = k;
            }
            overrides(&common, episodes, None).apply(&mut cfg, split)?;
            let report = cmd_eval(&checkpoint, &cfg, split)?;
            print_row(&report.row, report.k_shot);
            let path = out_path(&out, &cfg, format!("eval_{}_k{}.json", split.name(), report.k_shot))?;
            write_eval_json(&report, &path)?;
        }
        Command::Ablate {
            common,
            checkpoint,
            episodes,
            k,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            overrides(&common, episodes, None).apply(&mut cfg, Partition::Test)?;
            let ks = k.unwrap_or_else(|| DEFAULT_K.to_vec());
            let rows = cmd_ablate(&checkpoint, &cfg, &ks)?;
            for r in &rows {
                print_row(&r.metrics, r.k_shot);
            }
            let path = out_path(&out, &cfg, "ablation.csv".into())?;
            write_ablation(&rows, &path)?;
        }
        Command::Gradcheck { common, preset, seeds } => {
            let preset = match (preset, &common.config) {
                (Some(p), _) => p,
                (None, Some(path)) => ExperimentConfig::load(Path::new(path))?.model.preset,
                (None, None) => "desk_vit_hebbian".to_string(),
            };
            let entries = cmd_gradcheck(&preset, seeds)?;
            let mut failed = Vec::new();
            for e in &entries {
                println!(
                    "{:<20} max rel err {:.3e}  {}  worst {}",
                    e.name,
                    e.max_rel_err,
                    if e.passed { "ok" } else { "FAIL" },
                    e.worst
                );
                if !e.passed {
                    failed.push(format!("{} ({}: {:.3e})", e.name, e.worst, e.max_rel_err));
                }
            }
            if !failed.is_empty() {
                return Err(AppError::Numerical(format!(
                    "gradient check above tolerance {TOLERANCE:e}: {}",
                    failed.join(", ")
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
