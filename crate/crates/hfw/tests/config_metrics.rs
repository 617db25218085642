use std::path::Path;

use hfw::config::{ExperimentConfig, Precision};
use hfw::metrics::{read_csv, to_csv, MetricsRow, COLUMNS};
use hfw::AppError;
use hfw_core::fewshot::{episode_metrics, summarize};
use hfw_core::hfw::MemoryScope;
use proptest::prelude::*;

const MINIMAL: &str = "schema_version = 1\n[model]\npreset = \"desk_vit\"\n";

fn config_err(text: &str) -> String {
    match ExperimentConfig::from_toml(text) {
        Err(e @ AppError::Config(_)) => {
            assert_eq!(e.exit_code(), 2);
            e.to_string()
        }
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn defaults_follow_the_episodic_protocol() {
    let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
    assert_eq!(cfg.seed, 42);
    assert_eq!(cfg.precision, Precision::F32);
    assert_eq!((cfg.episodes.n_way, cfg.episodes.k_shot, cfg.episodes.n_query), (5, 1, 15));
    assert_eq!((cfg.episodes.train, cfg.episodes.val, cfg.episodes.test), (600, 200, 400));
    assert_eq!(cfg.data.split, [0.8, 0.1, 0.1]);
    assert_eq!(cfg.data.preprocess.target, 84);
    assert_eq!(cfg.run_id(), "desk_vit");
    // the 84 px target pads to a multiple of the 8 px patch
    assert_eq!(cfg.model_config().unwrap().image_size(), 88);
}

#[test]
fn unknown_keys_name_their_path() {
    let msg = config_err("schema_version = 1\n[model]\npreset = \"desk_vit\"\nwidth = 3\n");
    assert!(msg.contains("`model.width`"), "{msg}");
    let msg = config_err(&format!("{MINIMAL}[data.preprocess]\ncrop = 2\n"));
    assert!(msg.contains("data.preprocess"), "{msg}");
    let msg = config_err(&format!("{MINIMAL}[episodes]\nn_way = \"five\"\n"));
    assert!(msg.contains("episodes.n_way"), "{msg}");
}

#[test]
fn invalid_values_are_rejected() {
    for (extra, field) in [
        ("[schedule]\ntotal_epochs = 0\n", "schedule"),
        ("[schedule]\nwarmup_epochs = 10\ntotal_epochs = 10\n", "schedule"),
        ("[schedule]\npatience = 0\n", "patience"),
        ("[episodes]\nn_way = 1\n", "episodes"),
        ("[episodes]\ntrain = 0\n", "episodes"),
        ("[data]\nsplit = [0.5, 0.5, 0.5]\n", "data.split"),
        ("[optim]\nlr = -1.0\n", "optim"),
        ("[data.preprocess]\nhflip_p = 2.0\n", "hflip_p"),
    ] {
        let msg = config_err(&format!("{MINIMAL}{extra}"));
        assert!(msg.contains(field), "{extra}: {msg}");
    }
    assert!(config_err("schema_version = 2\n[model]\npreset = \"desk_vit\"\n").contains("schema_version"));
    assert!(config_err("schema_version = 1\n[model]\npreset = \"nope\"\n").contains("model"));
    // hfw settings need a preset with HFW modules
    assert!(config_err(&format!("{MINIMAL}[model.hfw]\neta_max = 2.0\n")).contains("hfw"));
}

#[test]
fn overrides_reach_the_model() {
    let cfg = ExperimentConfig::from_toml(
        "schema_version = 1\n[model]\npreset = \"desk_vit_hebbian\"\n[model.hfw]\neta_max = 0.5\nmemory_scope = \"per_episode\"\n[data.preprocess]\ntarget = 28\n",
    )
    .unwrap();
    let m = cfg.model_config().unwrap();
    let h = m.hfw().unwrap();
    assert_eq!((h.eta_max, h.memory_scope), (0.5, MemoryScope::PerEpisode));
    assert_eq!(m.image_size(), 32);
}

#[test]
fn shipped_configs_load_and_round_trip() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("toml") {
            continue;
        }
        let cfg = ExperimentConfig::load(&path).unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again, "{}", path.display());
        seen += 1;
    }
    assert!(seen >= 2);
}

fn row(acc_ci95: Option<f64>, eta: Vec<f64>, lr: f64) -> MetricsRow {
    let m = episode_metrics(&[0, 1, 1, 0], &[0, 1, 0, 0], 2, 0.25).unwrap();
    let mut r = MetricsRow::new("run, \"quoted\"", 3, "val", &summarize(&[m]).unwrap(), lr, &[], 1.5);
    r.acc_ci95 = acc_ci95;
    r.lambda_values = eta.iter().map(|e| 1.0 - e).collect();
    r.eta_values = eta;
    r
}

#[test]
fn csv_header_and_empty_ci() {
    let text = to_csv(&[row(None, vec![], 1e-3)]).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), COLUMNS.join(","));
    let body = lines.next().unwrap();
    assert!(body.contains(",0.75,,"), "{body}");
    assert!(body.contains("[]"));
    assert!(read_csv("a,b\n1,2\n").is_err());
}

proptest! {
    #[test]
    fn csv_round_trips(ci in proptest::option::of(0.0f64..1.0), eta in proptest::collection::vec(0.0f64..1.0, 0..4), lr in 0.0f64..1.0) {
        let rows = vec![row(ci, eta.clone(), lr), row(None, eta, 0.0)];
        let back = read_csv(&to_csv(&rows).unwrap()).unwrap();
        prop_assert_eq!(back, rows);
    }
}
