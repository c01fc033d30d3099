//! Drives the `mmfd` binary end to end on small corpora: exit codes, file
//! round trips, report layout and cross-command consistency.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmfd_core::datagen::{generate_corpus, load_corpus, CorpusSpec};
use mmfd_core::fusion::{load_checkpoint, Model, ModelConfig};
use mmfd_core::train::{MetricsReport, TrainHistory};
use mmfd_xcli::report::CSV_HEADER;

fn mmfd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmfd")).args(args).output().expect("spawn mmfd")
}

fn code(args: &[&str]) -> i32 {
    mmfd(args).status.code().expect("exit code")
}

fn ok(args: &[&str]) -> String {
    let out = mmfd(args);
    assert!(
        out.status.success(),
        "mmfd {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the minimal model config and returns its path.
fn minimal_config(dir: &Path) -> PathBuf {
    let p = dir.join("model.json");
    std::fs::write(&p, serde_json::to_string(&ModelConfig::minimal()).unwrap()).unwrap();
    p
}

fn rows(csv: &str) -> Vec<Vec<String>> {
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["train", "--bogus"]), 1);
    // invalid input
    let out = dir.path().join("x.corpus");
    assert_eq!(code(&["gen", "--n-topics", "1", "--out", s(&out)]), 2);
    assert_eq!(code(&["eval", "--checkpoint", "/nonexistent", "--corpus", "/nonexistent"]), 2);
    // numerical failure
    assert_eq!(code(&["gradcheck", "--model", "linear"]), 0);
    assert_eq!(code(&["gradcheck", "--model", "linear", "--threshold", "0"]), 3);
}

#[test]
fn gen_round_trips_through_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.corpus");
    ok(&["gen", "--n-samples", "25", "--noise", "0.2", "--corpus-seed", "9", "--out", s(&path)]);
    let spec = CorpusSpec {
        n_samples: 25,
        noise_level: 0.2,
        seed: 9,
        ..CorpusSpec::default()
    };
    assert_eq!(load_corpus(&path).unwrap(), generate_corpus(&spec).unwrap());
}

#[test]
fn train_then_eval_reproduces_the_stored_validation_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("c.corpus");
    let cfg = minimal_config(d);
    ok(&["gen", "--n-samples", "40", "--out", s(&corpus)]);

    // epochs = 0 stores the initial model
    let init = d.join("init");
    ok(&["train", "--corpus", s(&corpus), "--config", s(&cfg), "--epochs", "0", "--out", s(&init)]);
    let ckpt = load_checkpoint(init.join("model.ckpt")).unwrap();
    assert_eq!(ckpt.params(), Model::new(ModelConfig::minimal()).unwrap().params());
    let h: TrainHistory = TrainHistory::from_json(&std::fs::read_to_string(init.join("history.json")).unwrap()).unwrap();
    assert!(h.epochs.is_empty() && h.best_epoch.is_none());

    let run = d.join("run");
    ok(&[
        "train", "--corpus", s(&corpus), "--config", s(&cfg), "--epochs", "2", "--batch-size", "8", "--out", s(&run),
    ]);
    let h = TrainHistory::from_json(&std::fs::read_to_string(run.join("history.json")).unwrap()).unwrap();
    let metrics = d.join("val.json");
    ok(&[
        "eval",
        "--checkpoint",
        s(&run.join("model.ckpt")),
        "--corpus",
        s(&corpus),
        "--split",
        "val",
        "--out",
        s(&metrics),
    ]);
    let m: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(m, h.best().unwrap().val);
}

#[test]
fn ablate_covers_the_grid_with_fixed_precision_and_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = minimal_config(d);
    let out = d.join("res");
    ok(&[
        "ablate",
        "--n-samples",
        "30",
        "--config",
        s(&cfg),
        "--variants",
        "text,text+audio:w2v",
        "--seeds",
        "0,1",
        "--epochs",
        "1",
        "--batch-size",
        "8",
        "--out",
        s(&out),
    ]);
    let csv = std::fs::read_to_string(out.join("ablate.csv")).unwrap();
    let rows = rows(&csv);
    let grid: Vec<(&str, &str)> = rows.iter().map(|r| (r[0].as_str(), r[6].as_str())).collect();
    assert_eq!(
        grid,
        [("text", "0"), ("text", "1"), ("audio+text/w2v", "0"), ("audio+text/w2v", "1"), ("text", "mean"), ("audio+text/w2v", "mean")]
    );
    for r in &rows {
        assert_eq!(r.len(), 11);
        for cell in &r[7..] {
            let (int, frac) = cell.split_once('.').expect("decimal point");
            assert!(int.chars().all(|c| c.is_ascii_digit()) && frac.len() == 4, "{cell}");
        }
    }
    // aggregate accuracy is the mean of its two seed rows
    let acc = |i: usize| rows[i][7].parse::<f64>().unwrap();
    assert!(((acc(0) + acc(1)) / 2.0 - acc(4)).abs() <= 1e-4);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("ablate.json")).unwrap()).unwrap();
    assert_eq!(json["provenance"]["seeds"], serde_json::json!([0, 1]));
}

#[test]
fn misalign_shift_zero_matches_a_plain_run_and_bad_shifts_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = minimal_config(d);
    let common = ["--n-samples", "30", "--config", s(&cfg), "--epochs", "1", "--batch-size", "8", "--seeds", "3"];
    let ab = d.join("ab");
    let mut args = vec!["ablate", "--variants", "audio+text+video:w2v", "--out", s(&ab)];
    args.extend(common);
    ok(&args);
    let mis = d.join("mis");
    let mut args = vec!["misalign", "--variants", "audio+text+video:w2v", "--shifts", "0,-2,4", "--out", s(&mis)];
    args.extend(common);
    ok(&args);

    let plain = rows(&std::fs::read_to_string(ab.join("ablate.csv")).unwrap());
    let shifted = rows(&std::fs::read_to_string(mis.join("misalign.csv")).unwrap());
    assert_eq!(shifted[0][0], "audio+text+video/w2v@shift0");
    assert_eq!(shifted[0][6..], plain[0][6..]);
    let names: Vec<&str> = shifted.iter().take(3).map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["audio+text+video/w2v@shift0", "audio+text+video/w2v@shift-2", "audio+text+video/w2v@shift4"]);

    let curve = std::fs::read_to_string(mis.join("curve.csv")).unwrap();
    let lines: Vec<&str> = curve.lines().collect();
    assert_eq!(lines[0], "shift,accuracy");
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[1], format!("0,{}", plain[0][7]));

    let mut args = vec!["misalign", "--shifts", "9", "--out", s(&mis)];
    args.extend(common);
    assert_eq!(code(&args), 2);
}

#[test]
fn compare_audio_runs_both_encoders_per_mask() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = minimal_config(d);
    let out = d.join("cmp");
    ok(&[
        "compare-audio",
        "--n-samples",
        "30",
        "--config",
        s(&cfg),
        "--variants",
        "text+audio",
        "--epochs",
        "1",
        "--batch-size",
        "8",
        "--out",
        s(&out),
    ]);
    let rows = rows(&std::fs::read_to_string(out.join("compare_audio.csv")).unwrap());
    let arms: Vec<(&str, &str)> = rows.iter().filter(|r| r[6] != "mean").map(|r| (r[0].as_str(), r[1].as_str())).collect();
    assert_eq!(arms, [("audio+text/vgg", "vgg"), ("audio+text/w2v", "w2v")]);
    assert_eq!(code(&["compare-audio", "--n-samples", "30", "--variants", "text", "--out", s(&out)]), 2);
}
