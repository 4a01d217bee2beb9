use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn m2fcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_m2fcn"))
        .args(args)
        .env_remove("M2FCN_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SHORT: [&str; 4] = [
    "--set",
    "schedule.phase1_iterations=20",
    "--set",
    "schedule.phase2_iterations=12",
];

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["--out", p(dir)];
    args.extend_from_slice(extra);
    args.push("synth");
    let out = m2fcn(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(m2fcn(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(m2fcn(&[]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let out = m2fcn(&["--set", "no.such.key=1", "--out", "/tmp/x", "synth"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no.such.key"));
    let out = m2fcn(&["--out", "/tmp/x", "train"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_of_ground_truth_maps_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(
        &data,
        &["--set", "data.train_count=2", "--set", "data.test_count=2"],
    );
    let eval = tmp.path().join("eval");
    let out = m2fcn(&[
        "--data",
        p(&data),
        "--out",
        p(&eval),
        "eval",
        "--pred",
        p(&data.join("labels")),
        "--split",
        "all",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(stdout(&out).starts_with("fscore 1.0\n"), "{}", stdout(&out));
    let csv = fs::read_to_string(tmp.path().join("eval/pr.csv")).unwrap();
    assert!(csv.starts_with("threshold,rand_split,rand_merge,fscore\n"));
    assert!(tmp.path().join("eval/scores.txt").exists());
}

#[test]
fn synth_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let small = ["--set", "data.train_count=2", "--set", "data.test_count=1"];
    let (a, b, c) = (
        tmp.path().join("a"),
        tmp.path().join("b"),
        tmp.path().join("c"),
    );
    synth(&a, &small);
    synth(&b, &small);
    let mut with_seed = small.to_vec();
    with_seed.extend_from_slice(&["--seed", "9"]);
    synth(&c, &with_seed);
    let img = |d: &Path| fs::read(d.join("images/000.pgm")).unwrap();
    assert_eq!(img(&a), img(&b));
    assert_ne!(img(&a), img(&c));
    assert!(!tmp.path().join("a.partial").exists());
}

#[test]
fn synth_refuses_non_empty_output() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("keep.txt"), "x").unwrap();
    let out = m2fcn(&["--out", p(tmp.path()), "synth"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_predict_eval_round_trip_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(
        &data,
        &["--set", "data.train_count=3", "--set", "data.test_count=2"],
    );
    let train = |dir: &Path| {
        let mut args = vec!["--data", p(&data), "--out", p(dir)];
        // Long enough for the maps to have contrast that survives 8-bit storage.
        args.extend_from_slice(&[
            "--set",
            "schedule.phase1_iterations=80",
            "--set",
            "schedule.phase2_iterations=20",
            "--set",
            "schedule.snapshot_every=5",
            "train",
        ]);
        let out = m2fcn(&args);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let (m1, m2) = (tmp.path().join("m1"), tmp.path().join("m2"));
    train(&m1);
    train(&m2);
    for f in [
        "model.ckpt",
        "pretrain.ckpt",
        "loss.csv",
        "loss_pretrain.csv",
        "snapshots/iter_000010.ckpt",
    ] {
        assert_eq!(
            fs::read(m1.join(f)).unwrap(),
            fs::read(m2.join(f)).unwrap(),
            "{f}"
        );
    }

    let pred = tmp.path().join("pred");
    let model = m1.join("model.ckpt");
    let out = m2fcn(&[
        "--data",
        p(&data),
        "--out",
        p(&pred),
        "predict",
        "--model",
        p(&model),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(fs::read_dir(&pred).unwrap().count(), 2);

    let (e1, e2) = (tmp.path().join("e1"), tmp.path().join("e2"));
    let from_model = m2fcn(&[
        "--data",
        p(&data),
        "--out",
        p(&e1),
        "eval",
        "--model",
        p(&model),
    ]);
    let from_pred = m2fcn(&[
        "--data",
        p(&data),
        "--out",
        p(&e2),
        "eval",
        "--pred",
        p(&pred),
    ]);
    assert!(from_model.status.success() && from_pred.status.success());
    let f = |o: &Output| -> f64 {
        stdout(o)
            .lines()
            .next()
            .unwrap()
            .trim_start_matches("fscore ")
            .parse()
            .unwrap()
    };
    // Stored maps are quantized to 8 bits, so scores agree only approximately.
    assert!(
        (f(&from_model) - f(&from_pred)).abs() < 0.05,
        "{} vs {}",
        stdout(&from_model),
        stdout(&from_pred)
    );
}

#[test]
fn gradcheck_passes() {
    let out = m2fcn(&["gradcheck", "--seeds", "1", "--per-param", "10"]);
    assert!(out.status.success(), "{}", stdout(&out));
    assert!(!stdout(&out).contains("FAIL"));
}

#[test]
fn ablate_prints_one_row_per_design() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(
        &data,
        &["--set", "data.train_count=2", "--set", "data.test_count=1"],
    );
    let abl = tmp.path().join("abl");
    let mut args = vec!["--data", p(&data), "--out", p(&abl)];
    args.extend_from_slice(&SHORT);
    args.extend_from_slice(&["--set", "eval.designs=III,VI", "ablate"]);
    let out = m2fcn(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let table = fs::read_to_string(tmp.path().join("abl/ablation.txt")).unwrap();
    assert_eq!(table, stdout(&out));
    assert!(
        table.contains("AD_III") && table.contains("AD_VI"),
        "{table}"
    );
}
