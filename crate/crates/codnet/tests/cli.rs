//! End-to-end tests of the `codnet` binary: real process spawns, real
//! files, exit-code contract, and bitwise determinism of file outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_codnet"))
}

/// Fresh scratch directory; wiped when the test recreates it.
fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("codnet-cli-{tag}-{}", std::process::id()));
    if dir.exists() {
        fs::remove_dir_all(&dir).unwrap();
    }
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary spawns")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {args:?} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn sorted_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    files
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

#[test]
fn synth_is_bitwise_deterministic_in_the_seed() {
    let root = scratch("synth-det");
    let a = root.join("a");
    let b = root.join("b");
    let c = root.join("c");
    for dir in [&a, &b] {
        run_ok(&[
            "synth", "--out", dir.to_str().unwrap(),
            "--count", "3", "--size", "64", "--difficulty", "0.6",
            "--seed", "21",
        ]);
    }
    run_ok(&[
        "synth", "--out", c.to_str().unwrap(),
        "--count", "3", "--size", "64", "--difficulty", "0.6",
        "--seed", "22",
    ]);

    let bytes_a = tree_bytes(&a);
    let bytes_b = tree_bytes(&b);
    assert!(!bytes_a.is_empty());
    assert_eq!(bytes_a, bytes_b, "same seed must reproduce files bitwise");
    assert_ne!(bytes_a, tree_bytes(&c), "a different seed must change the data");

    for sub in ["Imgs", "GT", "Edge"] {
        assert_eq!(sorted_files(&a.join(sub)).len(), 3, "{sub} count");
    }
}

#[test]
fn synth_output_is_a_loadable_dataset_and_scores_itself_perfectly() {
    let root = scratch("synth-metrics");
    let data = root.join("data");
    run_ok(&[
        "synth", "--out", data.to_str().unwrap(),
        "--count", "4", "--size", "64", "--seed", "5",
    ]);

    // A ground truth scored against itself is a perfect prediction.
    let report = root.join("reports").join("self.csv");
    let stdout = run_ok(&[
        "metrics",
        "--pred", data.join("GT").to_str().unwrap(),
        "--gt", data.join("GT").to_str().unwrap(),
        "--out", report.to_str().unwrap(),
    ]);
    assert!(stdout.contains("S 1.0000"), "stdout: {stdout}");
    assert!(stdout.contains("MAE 0.0000"), "stdout: {stdout}");

    let csv = fs::read_to_string(&report).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "id,s_measure,e_measure,weighted_f,mae"
    );
    assert_eq!(lines.count(), 4, "one row per image");
    assert!(report.with_extension("json").is_file());
}

#[test]
fn train_predict_eval_round_trip_through_the_binary() {
    let root = scratch("train-flow");
    let out_dir = root.join("run");
    let config_path = root.join("run.toml");
    fs::write(
        &config_path,
        format!(
            r#"
seed = 5
precision = "f64"

[network]
variant = "M4"

[network.backbone]
channels = [8, 12, 16, 24]

[train]
epochs = 1
batch_size = 4
input_size = 32

[data]
source = "synthetic"
count = 6
test_count = 2
difficulty = 0.5

[paths]
out_dir = "{}"
"#,
            out_dir.display()
        ),
    )
    .unwrap();

    let stdout = run_ok(&["train", "--config", config_path.to_str().unwrap()]);
    assert!(stdout.contains("variant M4"), "stdout: {stdout}");
    let last = out_dir.join("last.ckpt");
    assert!(last.is_file(), "training must leave a checkpoint behind");
    assert!(out_dir.join("train_log.jsonl").is_file());

    // Inputs for prediction: a small synthetic folder dataset.
    let data = root.join("data");
    run_ok(&[
        "synth", "--out", data.to_str().unwrap(),
        "--count", "3", "--size", "64", "--seed", "30",
    ]);
    let imgs = data.join("Imgs");

    // Plain prediction: one map per input, at the input's native size.
    let pred = root.join("pred");
    run_ok(&[
        "predict",
        "--checkpoint", last.to_str().unwrap(),
        "--input", imgs.to_str().unwrap(),
        "--out", pred.to_str().unwrap(),
    ]);
    let maps = sorted_files(&pred);
    assert_eq!(maps.len(), 3);
    let sample = image::open(&maps[0]).unwrap();
    assert_eq!((sample.width(), sample.height()), (64, 64));

    // Edges and overlays multiply the per-input file count.
    let pred_full = root.join("pred-full");
    run_ok(&[
        "predict",
        "--checkpoint", last.to_str().unwrap(),
        "--input", imgs.to_str().unwrap(),
        "--out", pred_full.to_str().unwrap(),
        "--save-edges",
        "--overlay",
        "--gt", data.join("GT").to_str().unwrap(),
    ]);
    let files = sorted_files(&pred_full);
    assert_eq!(files.len(), 9, "mask + edge + overlay per input");
    let overlays: Vec<_> = files
        .iter()
        .filter(|p| p.to_string_lossy().ends_with("_overlay.png"))
        .collect();
    assert_eq!(overlays.len(), 3);
    let panel = image::open(overlays[0]).unwrap();
    assert_eq!(panel.height(), 64);
    assert!(panel.width() >= 3 * 64, "three panels side by side");

    // Prediction is bitwise deterministic.
    let pred_again = root.join("pred-again");
    run_ok(&[
        "predict",
        "--checkpoint", last.to_str().unwrap(),
        "--input", imgs.to_str().unwrap(),
        "--out", pred_again.to_str().unwrap(),
    ]);
    assert_eq!(tree_bytes(&pred), tree_bytes(&pred_again));

    // Eval on the checkpoint's held-out synthetic split.
    let eval_out = root.join("eval");
    let stdout = run_ok(&[
        "eval",
        "--checkpoint", last.to_str().unwrap(),
        "--out", eval_out.to_str().unwrap(),
    ]);
    assert!(stdout.contains("synthetic-heldout"), "stdout: {stdout}");
    assert!(eval_out.join("eval-synthetic-heldout.csv").is_file());
    assert!(eval_out.join("eval-synthetic-heldout.json").is_file());

    // Eval again on an on-disk folder dataset.
    let stdout = run_ok(&[
        "eval",
        "--checkpoint", last.to_str().unwrap(),
        "--data-root", data.to_str().unwrap(),
        "--out", eval_out.to_str().unwrap(),
    ]);
    assert!(stdout.contains("data:"), "stdout: {stdout}");
    assert!(eval_out.join("eval-data.csv").is_file());

    // A directory with no images is a runtime failure, not a silent pass.
    let empty = root.join("empty");
    fs::create_dir_all(&empty).unwrap();
    let no_inputs = run(&[
        "predict",
        "--checkpoint", last.to_str().unwrap(),
        "--input", empty.to_str().unwrap(),
        "--out", root.join("none").to_str().unwrap(),
    ]);
    assert_eq!(no_inputs.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&no_inputs.stderr).contains("no inputs"),
        "stderr: {}",
        String::from_utf8_lossy(&no_inputs.stderr)
    );
}

#[test]
fn usage_and_runtime_failures_map_to_distinct_exit_codes() {
    let root = scratch("exit-codes");

    // Unknown flags and invalid values are usage errors (1).
    assert_eq!(run(&["--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--no-such-flag"]).status.code(), Some(1));
    let bad_size = run(&[
        "synth", "--out", root.join("x").to_str().unwrap(), "--size", "33",
    ]);
    assert_eq!(bad_size.status.code(), Some(1));
    assert!(
        String::from_utf8_lossy(&bad_size.stderr).contains("usage error"),
        "stderr: {}",
        String::from_utf8_lossy(&bad_size.stderr)
    );
    assert_eq!(
        run(&["train", "--variant", "M9"]).status.code(),
        Some(1),
        "unknown variant"
    );
    assert_eq!(
        run(&["train", "--config", root.join("missing.toml").to_str().unwrap()])
            .status
            .code(),
        Some(1),
        "unreadable config"
    );

    // Missing runtime inputs are runtime errors (2).
    let no_ckpt = run(&[
        "eval", "--checkpoint", root.join("none.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(no_ckpt.status.code(), Some(2));

    let empty = root.join("empty");
    fs::create_dir_all(&empty).unwrap();
    let no_inputs = run(&[
        "predict",
        "--checkpoint", root.join("none.ckpt").to_str().unwrap(),
        "--input", empty.to_str().unwrap(),
        "--out", root.join("out").to_str().unwrap(),
    ]);
    assert_eq!(no_inputs.status.code(), Some(2), "missing checkpoint");

    // Help text enumerates the commands and exits cleanly.
    let help = run(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    for cmd in ["train", "eval", "predict", "ablate", "synth", "metrics"] {
        assert!(text.contains(cmd), "help must mention {cmd}");
    }
}
