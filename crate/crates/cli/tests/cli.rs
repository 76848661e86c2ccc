use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ctseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctseg"))
        .args(args)
        .current_dir(dir)
        .env_remove("CTSEG_SEED")
        .env_remove("CTSEG_THREADS")
        .env_remove("CTSEG_REPORT")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ctseg(dir, args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_dataset(dir: &Path, seed: &str) {
    ok(
        dir,
        &[
            "--seed",
            seed,
            "synth",
            "--out",
            "data",
            "--n",
            "5",
            "--size-min",
            "32",
            "--size-max",
            "32",
            "--slices-min",
            "6",
            "--slices-max",
            "10",
        ],
    );
}

#[test]
fn no_arguments_prints_usage_and_exits_one() {
    let t = tempfile::tempdir().unwrap();
    let out = ctseg(t.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout) + String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("Usage"), "{text}");
}

#[test]
fn usage_errors_exit_one() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(ctseg(t.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(ctseg(t.path(), &["folds", "--bogus"]).status.code(), Some(1));
    assert_eq!(ctseg(t.path(), &["folds", "--manifest", "m.tsv"]).status.code(), Some(1));
    assert_eq!(ctseg(t.path(), &["--seed", "x", "selftest"]).status.code(), Some(1));
    fs::write(
        t.path().join("stats.txt"),
        "mean=0\nstd=1\nsample_fraction=1\nseed=0\nn_volumes_sampled=1\n",
    )
    .unwrap();
    let bad_window = ctseg(
        t.path(),
        &[
            "preprocess",
            "--input",
            "v.ctv",
            "--stats",
            "stats.txt",
            "--out",
            "o.ctv",
            "--q-low",
            "0.9",
            "--q-high",
            "0.5",
        ],
    );
    assert_eq!(bad_window.status.code(), Some(1));
}

#[test]
fn help_and_version_exit_zero() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(ctseg(t.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(ctseg(t.path(), &["--version"]).status.code(), Some(0));
    let help = ok(t.path(), &["train", "--help"]);
    for default in [
        "[default: 0.6]",
        "[default: 0.99]",
        "[default: 16]",
        "[default: 128]",
        "[default: 28]",
    ] {
        assert!(help.contains(default), "missing {default}");
    }
}

#[test]
fn data_errors_exit_two() {
    let t = tempfile::tempdir().unwrap();
    let missing = ctseg(t.path(), &["folds", "--manifest", "nope.tsv", "--out", "plan.tsv"]);
    assert_eq!(missing.status.code(), Some(2));
    fs::write(t.path().join("m.tsv"), "a\ta.ctv\t-\t0\t1.0\n").unwrap();
    let bad = ctseg(t.path(), &["folds", "--manifest", "m.tsv", "--out", "plan.tsv"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("line 1"));
}

#[test]
fn folds_follow_slice_count_order() {
    let t = tempfile::tempdir().unwrap();
    // Slice counts 1..=10 in scrambled order; thickness breaks no ties here.
    let order = [7, 3, 10, 1, 5, 9, 2, 8, 6, 4];
    let manifest: String = order.iter().map(|s| format!("vol{s:02}\tvol{s:02}.ctv\t-\t{s}\t2.5\n")).collect();
    fs::write(t.path().join("m.tsv"), manifest).unwrap();
    ok(t.path(), &["folds", "--manifest", "m.tsv", "--k", "5", "--out", "plan.tsv"]);
    let plan = fs::read_to_string(t.path().join("plan.tsv")).unwrap();
    let mut expected = String::new();
    for s in 1..=10 {
        expected.push_str(&format!("{}\tvol{s:02}\n", (s - 1) / 2));
    }
    assert_eq!(plan, expected);
    let run = fs::read_to_string(t.path().join("plan.tsv.run")).unwrap();
    assert!(run.contains("command=folds") && run.contains("config.k=5") && run.contains("wall_seconds="));
}

#[test]
fn evaluate_perfect_prediction_reports_one() {
    let t = tempfile::tempdir().unwrap();
    small_dataset(t.path(), "4");
    let out = ok(
        t.path(),
        &[
            "evaluate",
            "--pred",
            "data/phantom_000.lbl",
            "--truth",
            "data/phantom_000.lbl",
            "--out",
            "r.tsv",
        ],
    );
    assert!(out.contains("phantom_000\t1.000000\t1.000000\t1.000000"), "{out}");
    assert!(t.path().join("r.tsv.run").exists());
}

#[test]
fn seed_flag_and_env_agree_and_synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    small_dataset(a.path(), "9");
    let out = Command::new(env!("CARGO_BIN_EXE_ctseg"))
        .args([
            "synth",
            "--out",
            "data",
            "--n",
            "5",
            "--size-min",
            "32",
            "--size-max",
            "32",
            "--slices-min",
            "6",
            "--slices-max",
            "10",
        ])
        .current_dir(b.path())
        .env("CTSEG_SEED", "9")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    for f in ["manifest.tsv", "phantom_000.ctv", "phantom_004.lbl"] {
        assert_eq!(
            fs::read(a.path().join("data").join(f)).unwrap(),
            fs::read(b.path().join("data").join(f)).unwrap(),
            "{f}"
        );
    }
    let run = fs::read_to_string(b.path().join("data/synth.run")).unwrap();
    assert!(run.contains("seed=9"));
}

#[test]
fn selftest_passes() {
    let t = tempfile::tempdir().unwrap();
    let out = ok(t.path(), &["--report", "self.txt", "selftest"]);
    assert!(out.contains("0 failed"), "{out}");
    assert!(!fs::read_to_string(t.path().join("self.txt")).unwrap().contains("FAIL"));
}

#[test]
fn preprocess_and_augment_write_outputs() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    small_dataset(d, "5");
    ok(
        d,
        &[
            "stats",
            "--manifest",
            "data/manifest.tsv",
            "--fraction",
            "0.4",
            "--out",
            "stats.txt",
        ],
    );
    ok(
        d,
        &[
            "preprocess",
            "--manifest",
            "data/manifest.tsv",
            "--stats",
            "stats.txt",
            "--out",
            "prep",
            "--size",
            "16",
            "--slices",
            "4",
            "--slice-mode",
            "training",
        ],
    );
    let m = fs::read_to_string(d.join("prep/manifest.tsv")).unwrap();
    assert_eq!(m.lines().count(), 5);
    assert!(m.lines().all(|l| l.split('\t').nth(3) == Some("4")));
    ok(
        d,
        &[
            "--seed",
            "3",
            "augment",
            "--input",
            "prep/phantom_000.ctv",
            "--labels",
            "prep/phantom_000.lbl",
            "--out",
            "aug",
        ],
    );
    let first = fs::read(d.join("aug/augmented.ctv")).unwrap();
    ok(
        d,
        &[
            "--seed",
            "3",
            "augment",
            "--input",
            "prep/phantom_000.ctv",
            "--labels",
            "prep/phantom_000.lbl",
            "--out",
            "aug",
        ],
    );
    assert_eq!(first, fs::read(d.join("aug/augmented.ctv")).unwrap());
    assert!(fs::read_to_string(d.join("aug/trace.tsv")).unwrap().starts_with("batch_id\tops"));
    assert!(d.join("aug/augment.run").exists());
    // Augmenting a volume that was never normalized is a data error.
    let raw = ctseg(d, &["augment", "--input", "data/phantom_000.ctv", "--out", "aug2"]);
    assert_eq!(raw.status.code(), Some(2));
}

#[test]
fn train_predict_evaluate_and_stack() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    small_dataset(d, "6");
    ok(d, &["folds", "--manifest", "data/manifest.tsv", "--k", "5", "--out", "plan.tsv"]);
    ok(
        d,
        &[
            "stats",
            "--manifest",
            "data/manifest.tsv",
            "--fraction",
            "0.4",
            "--out",
            "stats.txt",
        ],
    );
    let train = |out: &str, target: &str, fold: &str| {
        ok(
            d,
            &[
                "--seed",
                "1",
                "train",
                "--manifest",
                "data/manifest.tsv",
                "--plan",
                "plan.tsv",
                "--fold",
                fold,
                "--out",
                out,
                "--mode",
                "3d",
                "--size",
                "32",
                "--slices",
                "4",
                "--max-epochs",
                "6",
                "--stats",
                "stats.txt",
                "--target",
                target,
            ],
        )
    };
    let log = train("multi", "multiclass", "0");
    assert!(log.contains("epochs=6"), "{log}");
    train("multi_again", "multiclass", "0");
    assert_eq!(
        fs::read(d.join("multi/params.prm")).unwrap(),
        fs::read(d.join("multi_again/params.prm")).unwrap()
    );
    train("bin", "binary", "1");
    for f in [
        "params.prm",
        "train_log.tsv",
        "stats.txt",
        "plan.tsv",
        "validation.tsv",
        "train.run",
    ] {
        assert!(d.join("multi").join(f).exists(), "{f}");
    }

    ok(
        d,
        &[
            "predict",
            "--params",
            "multi/params.prm",
            "--stats",
            "stats.txt",
            "--manifest",
            "data/manifest.tsv",
            "--plan",
            "plan.tsv",
            "--fold",
            "0",
            "--out",
            "pred",
        ],
    );
    let report = ok(d, &["--report", "eval.tsv", "evaluate", "--predictions", "pred/predictions.tsv"]);
    assert!(report.starts_with("id\tdice_1\tdice_2\ttotal_pooled-foreground\n"));
    assert!(report.contains("\nmean\t") && report.contains("\nstd\t"));
    assert!(d.join("eval.tsv.run").exists());

    fs::write(
        d.join("candidates.txt"),
        "member multi/params.prm multiclass-3d 0.7\nmember bin/params.prm binary-3d 0.6\nmember multi_again/params.prm multiclass-2d 0.5\n",
    )
    .unwrap();
    ok(
        d,
        &[
            "stack",
            "select",
            "--candidates",
            "candidates.txt",
            "--top-n",
            "1",
            "--out",
            "top.txt",
        ],
    );
    let top = fs::read_to_string(d.join("top.txt")).unwrap();
    assert_eq!(top.lines().filter(|l| l.starts_with("member")).count(), 1);
    assert!(top.contains("multi/params.prm multiclass-3d 0.7"));
    // Binary members can only feed a stacker.
    let mixed = ctseg(
        d,
        &[
            "stack",
            "select",
            "--candidates",
            "candidates.txt",
            "--top-n",
            "2",
            "--out",
            "top2.txt",
        ],
    );
    assert_eq!(mixed.status.code(), Some(2));

    ok(
        d,
        &[
            "stack",
            "train",
            "--spec",
            "candidates.txt",
            "--manifest",
            "data/manifest.tsv",
            "--plan",
            "plan.tsv",
            "--fold",
            "2",
            "--stats",
            "stats.txt",
            "--epochs",
            "5",
            "--out",
            "stack",
        ],
    );
    let spec = fs::read_to_string(d.join("stack/ensemble.txt")).unwrap();
    assert!(spec.contains("combiner stacker") && spec.contains("stacker "));
    ok(
        d,
        &[
            "stack",
            "predict",
            "--spec",
            "stack/ensemble.txt",
            "--stats",
            "stats.txt",
            "--input",
            "data/phantom_000.ctv",
            "--labels",
            "data/phantom_000.lbl",
            "--out",
            "s.pmap",
            "--labels-out",
            "s.lbl",
            "--truth-out",
            "t.lbl",
        ],
    );
    let eval = ok(d, &["evaluate", "--pred", "s.lbl", "--truth", "t.lbl", "--out", "s.tsv"]);
    assert!(eval.contains("\nmean\t"));
    assert!(d.join("s.pmap.run").exists());
}
