use std::path::Path;
use std::process::{Command, Output};

use mswa::model::checkpoint::Checkpoint;
use mswa::model::corpus::synthetic_text;
use mswa::model::{Model, ModelConfig};
use mswa::plan::Strategy;

fn mswa(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mswa")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn plan_reports_exact_budget_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let text =
        stdout(&mswa(&["plan", "--strategy", "mswa", "--layers", "4", "--heads", "4", "--base", "16"], dir.path()));
    assert!(text.contains("ratio=225/256"), "{text}");
    assert!(text.contains("8 16 32 64"), "{text}");
    let text = stdout(&mswa(&["plan", "--strategy", "uniform", "--base", "16"], dir.path()));
    assert!(text.contains("ratio=1"), "{text}");
}

#[test]
fn invalid_plan_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = mswa(&["plan", "--strategy", "mswa", "--heads", "6"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("heads"));
}

#[test]
fn cost_compare_prints_ablation_column() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let text = stdout(&mswa(&["cost", "--compare", "--out", out.to_str().unwrap()], dir.path()));
    for value in ["4.55", "4.00", "2.28", "2.00", "1.14", "1.00", "0.57", "0.50"] {
        assert!(text.contains(value), "{value} missing from {text}");
    }
    assert_eq!(csv_rows(&out.join("cost_compare.csv")).len(), 8);
    assert!(out.join("resolved_config.toml").exists());
}

#[test]
fn missing_corpus_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = mswa(&["train", "--corpus", "no_such_corpus.txt", "--steps", "1"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_corpus.txt"));
}

#[test]
fn uniform_logits_score_eight_bits_per_byte() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.txt"), synthetic_text(1, 20_000)).unwrap();
    let mut model = Model::new(ModelConfig::local(4, 4, 8, Strategy::Mswa, 16)).unwrap();
    let head = model.params_mut().iter_mut().find(|p| p.name == "lm_head").unwrap();
    head.tensor = mswa::Tensor::zeros(head.tensor.shape());
    Checkpoint::capture(&model, None, 0).save(&dir.path().join("zero.ckpt")).unwrap();
    let text = stdout(&mswa(
        &["eval", "--corpus", "c.txt", "--checkpoint", "zero.ckpt", "--seq-len", "64", "--split", "test"],
        dir.path(),
    ));
    assert!(text.contains("ppl=256.00 bpc=8.000"), "{text}");
}

#[test]
fn train_writes_metrics_config_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.txt"), synthetic_text(2, 50_000)).unwrap();
    std::fs::write(dir.path().join("run.toml"), "layers = 4\nheads = 4\nhead_dim = 8\nbase_window = 16\nsteps = 9\n")
        .unwrap();
    let args = [
        "train",
        "--config",
        "run.toml",
        "--corpus",
        "c.txt",
        "--steps",
        "4",
        "--seq-len",
        "32",
        "--batch-size",
        "2",
        "--checkpoint-every",
        "2",
        "--seed",
        "5",
        "--out",
        "run",
    ];
    stdout(&mswa(&args, dir.path()));
    let run = dir.path().join("run");
    let rows = csv_rows(&run.join("metrics.csv"));
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r[1].parse::<f64>().unwrap().is_finite()));
    let resolved = std::fs::read_to_string(run.join("resolved_config.toml")).unwrap();
    for line in ["steps = 4", "head_dim = 8", "seed = 5", "base_window = 16"] {
        assert!(resolved.contains(line), "{line} missing from {resolved}");
    }
    assert!(run.join("checkpoints/step_000002.ckpt").exists());
    assert_eq!(Checkpoint::load(&run.join("final.ckpt")).unwrap().step, 4);

    // the resolved file reproduces the run exactly
    let again = ["train", "--config", "run/resolved_config.toml", "--out", "again"];
    stdout(&mswa(&again, dir.path()));
    let first = std::fs::read(run.join("final.ckpt")).unwrap();
    assert_eq!(std::fs::read(dir.path().join("again/final.ckpt")).unwrap(), first);
}

#[test]
fn sliding_window_cache_stops_growing() {
    let dir = tempfile::tempdir().unwrap();
    let common = ["bench", "--positions", "96", "--layers", "4", "--heads", "4", "--head-dim", "8"];
    let swa = [&common[..], &["--strategy", "uniform", "--base-window", "16", "--out", "swa"]].concat();
    let full = [&common[..], &["--layer-pattern", "full", "--out", "full"]].concat();
    stdout(&mswa(&swa, dir.path()));
    stdout(&mswa(&full, dir.path()));
    let bytes = |name: &str| -> Vec<u64> {
        csv_rows(&dir.path().join(name).join("bench.csv")).iter().map(|r| r[2].parse().unwrap()).collect()
    };
    let (swa, full) = (bytes("swa"), bytes("full"));
    assert_eq!(swa.len(), 96);
    for p in 16..96 {
        assert!(swa[p] <= full[p]);
        assert_eq!(swa[p], swa[16]);
    }
    assert!(full.windows(2).all(|w| w[1] > w[0]));
}
