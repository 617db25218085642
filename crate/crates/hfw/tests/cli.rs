//! End-to-end runs of the `hfw` binary on a tiny synthetic setup.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hfw::metrics::read_csv;

fn tiny_config(dir: &Path, run_id: &str) -> PathBuf {
    let text = format!(
        r#"schema_version = 1
seed = 3
output_dir = "{out}"
run_id = "{run_id}"

[model]
preset = "desk_vit_hebbian"

[data]
source = "synth"
split = [0.5, 0.25, 0.25]

[data.preprocess]
target = 16
crop_pad = 1
hflip_p = 0.0
rotation_deg = 0.0

[data.synth]
classes = 12
per_class = 6
extent = 16

[episodes]
n_way = 3
k_shot = 1
n_query = 2
train = 3
val = 2
test = 4

[schedule]
warmup_epochs = 1
total_epochs = 2
patience = 2
"#,
        out = dir.join("runs").display()
    );
    let path = dir.join(format!("{run_id}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}

fn hfw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hfw"))
        .args(args)
        .env_remove("HFW_DATA_ROOT")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn text(out: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_is_reproducible_and_eval_reads_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "tiny");
    let run = dir.path().join("runs/tiny");

    let first = hfw(&["train", "--config", s(&cfg), "--deterministic"]);
    assert_eq!(code(&first), 0, "{}", text(&first));
    for f in ["config.resolved.toml", "metrics.csv", "metrics.json", "best.hfwckpt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let csv_a = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let ckpt_a = std::fs::read(run.join("best.hfwckpt")).unwrap();
    let second = hfw(&["train", "--config", s(&cfg), "--deterministic"]);
    assert_eq!(code(&second), 0, "{}", text(&second));
    assert_eq!(csv_a, std::fs::read_to_string(run.join("metrics.csv")).unwrap());
    assert_eq!(ckpt_a, std::fs::read(run.join("best.hfwckpt")).unwrap());

    let rows = read_csv(&csv_a).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().map(|r| r.split.as_str()).collect::<Vec<_>>(), ["train", "val", "train", "val"]);
    assert!(rows.iter().all(|r| r.eta_values.len() == 2 && r.wall_seconds == 0.0));

    let ckpt = run.join("best.hfwckpt");
    let json = dir.path().join("one.json");
    let out = hfw(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--episodes", "1", "--out", s(&json)]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert!(v["row"]["acc_ci95"].is_null());
    assert_eq!(v["row"]["episodes"], 1);

    // K = [1] in the ablation is the K = 1 test evaluation
    let eval_json = dir.path().join("k1.json");
    let out = hfw(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--k", "1", "--out", s(&eval_json)]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let ablate_csv = dir.path().join("ab.csv");
    let out = hfw(&["ablate", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--k", "1,3", "--out", s(&ablate_csv)]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let eval: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&eval_json).unwrap()).unwrap();
    let table = std::fs::read_to_string(&ablate_csv).unwrap();
    let mut r = csv::Reader::from_reader(table.as_bytes());
    let recs: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(recs.len(), 2);
    assert_eq!(&recs[0][1], "1");
    assert_eq!(recs[0][4].parse::<f64>().unwrap(), eval["row"]["acc_mean"].as_f64().unwrap());
    // 6 images per class leave 2 queries at K = 3, one at K = 5 and none at K = 6
    let out = hfw(&["ablate", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--k", "5"]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let out = hfw(&["ablate", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--k", "1,6"]);
    assert_eq!(code(&out), 2, "{}", text(&out));

    // the checkpoint belongs to a different preset than this config
    let other = std::fs::read_to_string(&cfg).unwrap().replace("desk_vit_hebbian", "desk_vit");
    let other_cfg = dir.path().join("other.toml");
    std::fs::write(&other_cfg, other).unwrap();
    let out = hfw(&["eval", "--config", s(&other_cfg), "--checkpoint", s(&ckpt)]);
    assert_eq!(code(&out), 2, "{}", text(&out));
}

#[test]
fn exit_codes_by_failure_kind() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "schema_version = 1\n[model]\npreset = \"desk_vit\"\ncolour = 1\n").unwrap();
    let out = hfw(&["train", "--config", s(&bad)]);
    assert_eq!(code(&out), 2, "{}", text(&out));
    assert!(text(&out).contains("model.colour"));

    let out = hfw(&["train", "--config", s(&dir.path().join("missing.toml"))]);
    assert_eq!(code(&out), 1, "{}", text(&out));

    let omni = dir.path().join("omni.toml");
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    std::fs::write(
        &omni,
        format!("schema_version = 1\n[model]\npreset = \"desk_vit\"\n[data]\nroot = \"{}\"\n", empty.display()),
    )
    .unwrap();
    let out = hfw(&["train", "--config", s(&omni)]);
    assert_eq!(code(&out), 4, "{}", text(&out));
    assert!(text(&out).contains("omniglot"));

    let ckpt = dir.path().join("junk.hfwckpt");
    std::fs::write(&ckpt, b"HFWCKPT\0junk").unwrap();
    let cfg = tiny_config(dir.path(), "codes");
    let out = hfw(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt)]);
    assert_eq!(code(&out), 4, "{}", text(&out));

    let out = hfw(&["gradcheck", "--preset", "no_such_model"]);
    assert_eq!(code(&out), 2, "{}", text(&out));
}

#[test]
fn prepare_data_caches_synth_glyphs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let out = hfw(&["prepare-data", "--root", s(&root), "--synth", "20", "--per-class", "3", "--extent", "12"]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let msg = text(&out);
    assert!(msg.contains("20 classes / 60 images") && msg.contains("split 16/2/2"), "{msg}");
    let again = hfw(&["prepare-data", "--root", s(&root), "--synth", "20", "--per-class", "3", "--extent", "12"]);
    assert!(text(&again).contains("up to date"), "{}", text(&again));
    let (ds, _) = hfw::data::read_pack(&root.join("synth.pack")).unwrap();
    assert_eq!(ds, hfw::data::synth_glyphs(20, 3, 12, 7).unwrap());

    let out = hfw(&["prepare-data", "--root", s(&dir.path().join("nothing"))]);
    assert_eq!(code(&out), 4, "{}", text(&out));
}

#[test]
fn gradcheck_passes_for_a_desk_preset() {
    let out = hfw(&["gradcheck", "--preset", "desk_vit_hebbian", "--seeds", "1"]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    assert!(!text(&out).contains("FAIL"));
}
