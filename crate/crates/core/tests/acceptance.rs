//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::f64::consts::LN_2;
use std::process::ExitCode;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use m2fcn::data::{augment36, synth_dataset, Flip, Sample, SynthParams, Transform};
use m2fcn::eval::{
    best_fscore_sweep, contingency, default_thresholds, rand_scores, LabelImage, RandScores,
};
use m2fcn::gradcheck::{run_suite, SUITE_TOLERANCE};
use m2fcn::network::{M2fcn, NetworkConfig, RecursiveInputs};
use m2fcn::objective::{class_balance_beta, side_loss, total_loss, BetaMode, BoundaryLabels};
use m2fcn::subnet::{receptive_field, SubNetConfig};
use m2fcn::trainer::{
    evaluate_losses, pretrain_stage1, train, LossRecord, Phase, TrainMode, TrainSchedule,
};
use m2fcn::{Graph, Tensor};

const GRAD_SEEDS: u64 = 5;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const RAND_ORACLE_TOL: f64 = 1e-12;
const LOSS_ORACLE_TOL: f64 = 1e-10;
const LOSS_CASES: u64 = 50;
const HAND_TOL: f64 = 1e-12;
const CLOSURE_TOL: f64 = 1e-12;
const FUSED_REDUCTION: f64 = 0.90;
const REDUCTION_ITERATIONS: usize = 400;
const COMPARISON_ITERATIONS: usize = 150;
const COMPARISON_SEEDS: u64 = 5;
const COMPARISON_WINS: usize = 4;

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

type Check = (&'static str, fn() -> Outcome);

fn outcome(name: &'static str, passed: bool, detail: String) -> Outcome {
    Outcome {
        name,
        passed,
        detail,
    }
}

fn main() -> ExitCode {
    let started = Instant::now();
    // Timed on its own so the runtime budget is not shared with training.
    let grad = gradient_suite();
    let checks: Vec<Check> = vec![
        ("architecture table", architecture_table),
        ("rand arithmetic", rand_arithmetic),
        ("loss oracle", loss_oracle),
        ("augmentation", augmentation),
        ("recursive inputs", recursive_inputs),
        ("pipeline closure", pipeline_closure),
        ("determinism", determinism),
    ];
    let mut outcomes = vec![grad];
    outcomes.extend(thread::scope(|s| {
        let handles: Vec<_> = checks.iter().map(|&(name, f)| (name, s.spawn(f))).collect();
        handles
            .into_iter()
            .map(|(name, h)| {
                h.join()
                    .unwrap_or_else(|_| outcome(name, false, "panicked".into()))
            })
            .collect::<Vec<_>>()
    }));
    let mut failed = 0;
    for o in &outcomes {
        println!(
            "{} {}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.detail
        );
        if !o.passed {
            failed += 1;
        }
    }
    println!(
        "{} of {} criteria passed in {:.1} s",
        outcomes.len() - failed,
        outcomes.len(),
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut failures = Vec::new();
    let mut checked = 0;
    for seed in 0..GRAD_SEEDS {
        let entries = match run_suite(seed) {
            Ok(e) => e,
            Err(e) => return outcome("gradient suite", false, format!("seed {seed}: {e}")),
        };
        for e in entries {
            checked += e.report.checked;
            if e.report.max_rel_error > worst.0 {
                worst = (e.report.max_rel_error, format!("{} seed {seed}", e.name));
            }
            if !e.passed() {
                failures.push(format!("{} seed {seed}", e.name));
            }
        }
    }
    let elapsed = t.elapsed();
    let passed = failures.is_empty() && elapsed <= GRAD_BUDGET;
    outcome(
        "gradient suite",
        passed,
        format!(
            "{GRAD_SEEDS} seeds, {checked} entries, max rel error {:.2e} ({}) <= {SUITE_TOLERANCE:e}, {:.1} s <= {} s{}",
            worst.0,
            worst.1,
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs(),
            if failures.is_empty() {
                String::new()
            } else {
                format!(", failing: {}", failures.join(", "))
            }
        ),
    )
}

fn architecture_table() -> Outcome {
    let cfg = NetworkConfig::paper();
    let rows: Vec<(usize, usize)> = (1..=cfg.levels())
        .map(|n| receptive_field(&cfg.subnet, n).expect("level in range"))
        .collect();
    let strides: Vec<usize> = rows.iter().map(|r| r.0).collect();
    let fields: Vec<usize> = rows.iter().map(|r| r.1).collect();
    let passed = strides == [1, 2, 4, 8, 16] && fields == [5, 14, 40, 92, 196];
    outcome(
        "architecture table",
        passed,
        format!("strides {strides:?}, receptive fields {fields:?}"),
    )
}

/// Every set partition of `n` elements as restricted growth strings.
fn partitions(n: usize) -> Vec<Vec<u32>> {
    fn grow(prefix: &mut Vec<u32>, max: u32, n: usize, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        for b in 0..=max + 1 {
            prefix.push(b);
            grow(prefix, max.max(b), n, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if n > 0 {
        grow(&mut vec![0], 0, n, &mut out);
    }
    out
}

/// Counts ordered element pairs (self-pairs included) directly.
fn pair_oracle(prop: &[u32], gt: &[u32]) -> (f64, f64) {
    let (mut both, mut same_prop, mut same_gt) = (0u64, 0u64, 0u64);
    for a in 0..prop.len() {
        for b in 0..prop.len() {
            let p = prop[a] == prop[b];
            let g = gt[a] == gt[b];
            both += u64::from(p && g);
            same_prop += u64::from(p);
            same_gt += u64::from(g);
        }
    }
    (both as f64 / same_prop as f64, both as f64 / same_gt as f64)
}

fn rand_arithmetic() -> Outcome {
    // (merge, split, reported F) per row.
    let table = [
        ("N4", 0.9619, 0.9010, 0.9304),
        ("VD2D", 0.9771, 0.9174, 0.9463),
        ("VD2D3D", 0.9891, 0.9555, 0.9720),
        ("1 stage", 0.9576, 0.9802, 0.9688),
        ("2 stage", 0.9759, 0.9880, 0.9819),
        ("3 stage", 0.9917, 0.9815, 0.9866),
    ];
    let round4 = |v: f64| (v * 1e4).round() / 1e4;
    let f = |m: f64, s: f64| RandScores::from_merge_split(m, s).fscore;
    let mut rows_ok = true;
    let mut exact = 0;
    let mut notes = Vec::new();
    for (name, m, s, reported) in table {
        let point = f(m, s);
        if (round4(point) - reported).abs() < 1e-9 {
            exact += 1;
            continue;
        }
        // The printed columns are themselves rounded to 4 decimals; the
        // reported F must then be reachable from inputs within half a unit.
        let h = 0.5e-4;
        let (lo, hi) = (f(m - h, s - h), f(m + h, s + h));
        let reachable = reported + 0.5e-4 > lo && reported - 0.5e-4 < hi;
        rows_ok &= reachable;
        notes.push(format!(
            "{name} gives {point:.6} (rounds to {:.4}); inputs within rounding give [{lo:.6}, {hi:.6}], {}",
            round4(point),
            if reachable { "consistent with the reported value" } else { "inconsistent" }
        ));
    }

    let mut pairs = 0usize;
    let mut worst = 0.0f64;
    for n in 1..=6 {
        let parts = partitions(n);
        let label = |p: &[u32]| {
            LabelImage::new(1, n, p.iter().map(|&b| b + 1).collect()).expect("valid raster")
        };
        for prop in &parts {
            let prop_img = label(prop);
            for gt in &parts {
                let scores = rand_scores(&contingency(&prop_img, &label(gt)).expect("non-empty"))
                    .expect("non-zero total");
                let (m, s) = pair_oracle(prop, gt);
                let fo = 2.0 * m * s / (m + s);
                worst = worst
                    .max((scores.merge - m).abs())
                    .max((scores.split - s).abs())
                    .max((scores.fscore - fo).abs());
                pairs += 1;
            }
        }
    }
    let passed = rows_ok && worst <= RAND_ORACLE_TOL;
    let mut detail = format!(
        "{exact}/{} table rows reproduced to 4 decimals from the printed columns; {pairs} partition pairs (n <= 6) vs pair-count oracle, max diff {worst:.1e} <= {RAND_ORACLE_TOL:e}",
        table.len()
    );
    for n in notes {
        detail.push_str("; ");
        detail.push_str(&n);
    }
    outcome("rand arithmetic", passed, detail)
}

/// `-β·ln(1-σ(s))` on boundary pixels, `-(1-β)·ln σ(s)` elsewhere, written
/// as `ln(1+e^{±s})` so large logits do not cancel.
fn pixel_loss(s: f64, boundary: bool, beta: f64) -> f64 {
    if boundary {
        beta * (1.0 + s.exp()).ln()
    } else {
        (1.0 - beta) * (1.0 + (-s).exp()).ln()
    }
}

fn loss_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for case in 0..LOSS_CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let stages = rng.random_range(1..=3);
        let mut cfg = NetworkConfig::new(stages, SubNetConfig::toy(1));
        for row in &mut cfg.alpha_side {
            for a in row.iter_mut() {
                *a = rng.random_range(0.0..2.0);
            }
        }
        for a in &mut cfg.alpha_fuse {
            *a = rng.random_range(0.0..2.0);
        }
        let (h, w) = (rng.random_range(4..=12), rng.random_range(4..=12));
        let mask: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.3)).collect();
        let labels = BoundaryLabels::new(h, w, mask.clone()).expect("valid mask");
        let image = Tensor::from_fn(&[1, h, w], |_| rng.random_range(0.0..1.0));
        let mut net = M2fcn::new(&cfg, case).expect("valid config");
        // Randomise heads, biases and fusion so the logits are far from zero.
        let ids: Vec<_> = net.params().iter().map(|(id, _)| id).collect();
        for id in ids {
            let e = net.params_mut().entry_mut(id);
            if e.name.contains("head") || e.name.contains("bias") || e.name.ends_with("fusion") {
                for v in e.value.data_mut() {
                    *v = rng.random_range(-1.5..1.5);
                }
            }
        }

        let mut g = Graph::new();
        let outs = net.forward_all(&mut g, &image).expect("forward");
        let terms = total_loss(&mut g, &outs, &labels, &cfg).expect("loss");
        let got = g.value(terms.total).data()[0];

        let nb = mask.iter().filter(|&&b| !b).count() as f64;
        let beta = nb / mask.len() as f64;
        let map_loss = |t: &Tensor| -> f64 {
            t.data()
                .iter()
                .zip(&mask)
                .map(|(&s, &b)| pixel_loss(s, b, beta))
                .sum()
        };
        let mut want = 0.0;
        for m in 0..stages {
            let maps: Vec<&Tensor> = outs.side[m].iter().map(|&v| g.value(v)).collect();
            for (n, t) in maps.iter().enumerate() {
                want += cfg.alpha_side[m][n] * map_loss(t);
            }
            let h_w = net.params().value(net.fusion_id(m)).data().to_vec();
            let fused = Tensor::from_fn(&[1, h, w], |i| {
                maps.iter().zip(&h_w).map(|(t, hn)| hn * t.data()[i]).sum()
            });
            want += cfg.alpha_fuse[m] * map_loss(&fused);
        }
        worst = worst.max((got - want).abs());
    }

    let hand = BoundaryLabels::new(2, 2, vec![true, false, false, false]).expect("valid mask");
    let beta = class_balance_beta(&hand, BetaMode::Balanced).expect("non-empty");
    let mut g = Graph::new();
    let zeros = g.constant(Tensor::zeros(&[1, 2, 2]));
    let l = side_loss(&mut g, zeros, &hand, beta).expect("loss");
    let hand_err = (g.value(l).data()[0] - 1.5 * LN_2).abs();

    let passed = worst <= LOSS_ORACLE_TOL && hand_err <= HAND_TOL;
    outcome(
        "loss oracle",
        passed,
        format!(
            "{LOSS_CASES} random cases max |diff| {worst:.1e} <= {LOSS_ORACLE_TOL:e}; 2x2 hand case (beta {beta}) off by {hand_err:.1e} <= {HAND_TOL:e}"
        ),
    )
}

fn same_sample(a: &Sample, b: &Sample) -> bool {
    a.image == b.image && a.labels == b.labels && a.segments == b.segments
}

fn augmentation() -> Outcome {
    let sample = synth_dataset(&SynthParams::new(40, 32, 4, 1.0), 7, 1)
        .expect("synthetic sample")
        .remove(0);
    let out = augment36(&sample);
    let identity_present = out.iter().any(|s| same_sample(s, &sample));
    let quarter = Transform {
        quarter_turns: 1,
        flip: Flip::None,
        scale: 1.0,
    };
    let mut turned = sample.clone();
    let mut shapes = Vec::new();
    for _ in 0..4 {
        turned = quarter.apply(&turned);
        shapes.push((turned.height(), turned.width()));
    }
    let composes = same_sample(&turned, &sample);
    let passed = out.len() == 36 && identity_present && composes;
    outcome(
        "augmentation",
        passed,
        format!(
            "{} outputs, identity member present: {identity_present}, four quarter turns restore the input: {composes} (extents {shapes:?})",
            out.len()
        ),
    )
}

fn corpus(seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let p = SynthParams::new(64, 64, 8, 2.0);
    (
        synth_dataset(&p, 100 + seed, 20).expect("train set"),
        synth_dataset(&p, 900 + seed, 5).expect("test set"),
    )
}

fn mean_last_fused(records: &[LossRecord]) -> f64 {
    records
        .iter()
        .map(|r| *r.fused.last().expect("one fused loss per stage"))
        .sum::<f64>()
        / records.len() as f64
}

fn test_fscore(net: &M2fcn, test: &[Sample]) -> f64 {
    let probs: Vec<_> = test
        .iter()
        .map(|s| net.predict(&s.image).expect("predict"))
        .collect();
    let gts: Vec<_> = test.iter().map(Sample::ground_truth).collect();
    best_fscore_sweep(&probs, &gts, &default_thresholds(), 1)
        .expect("sweep")
        .best
        .fscore
}

fn schedule(seed: u64, phase2: usize) -> TrainSchedule {
    let mut s = TrainSchedule::toy();
    s.seed = seed;
    s.phase2 = Phase {
        iterations: phase2,
        lr: s.phase2.lr,
    };
    s
}

fn two_stage(cfg: &NetworkConfig, seed: u64, single: &M2fcn) -> M2fcn {
    let mut net = M2fcn::new(cfg, seed).expect("valid config");
    net.init_stage1_from(single).expect("matching ladder");
    net
}

/// (a) loss reduction, returns (passed, detail).
fn fused_reduction() -> (bool, String) {
    let (train_set, _) = corpus(0);
    let sched = schedule(0, REDUCTION_ITERATIONS);
    let cfg = NetworkConfig::toy();
    let (single, _) = pretrain_stage1(&cfg, &train_set, &sched).expect("pretraining");
    let mut net = two_stage(&cfg, 0, &single);
    let before = mean_last_fused(&evaluate_losses(&net, &train_set).expect("losses"));
    train(&mut net, &train_set, &sched).expect("training");
    let after = mean_last_fused(&evaluate_losses(&net, &train_set).expect("losses"));
    let reduction = 1.0 - after / before;
    (
        reduction >= FUSED_REDUCTION,
        format!(
            "(a) fused loss {before:.1} -> {after:.1} over {REDUCTION_ITERATIONS} iterations, reduction {:.1}% >= {:.0}%",
            100.0 * reduction,
            100.0 * FUSED_REDUCTION
        ),
    )
}

/// (b) stage-1 parameters after one step under each mode.
fn stepwise_vs_end_to_end() -> (bool, String) {
    let (train_set, _) = corpus(0);
    let mut sched = schedule(0, 1);
    sched.phase1.iterations = 20;
    let cfg = NetworkConfig::toy();
    let (single, _) = pretrain_stage1(&cfg, &train_set, &sched).expect("pretraining");
    let stage1 = |net: &M2fcn| -> Vec<Vec<u64>> {
        net.params()
            .iter()
            .filter(|(_, e)| e.name.starts_with("stage1."))
            .map(|(_, e)| e.value.data().iter().map(|v| v.to_bits()).collect())
            .collect()
    };
    let mut changed = Vec::new();
    for mode in [TrainMode::Stepwise, TrainMode::EndToEnd] {
        let mut net = two_stage(&cfg, 0, &single);
        let start = stage1(&net);
        sched.mode = mode;
        train(&mut net, &train_set, &sched).expect("one step");
        changed.push(stage1(&net) != start);
    }
    (
        !changed[0] && changed[1],
        format!(
            "(b) after one step stage 1 changed: stepwise {}, end-to-end {}",
            changed[0], changed[1]
        ),
    )
}

/// (c) per-seed test F-scores of all-level vs top-level recursive inputs.
fn multi_vs_single(seed: u64) -> (f64, f64) {
    let (train_set, test_set) = corpus(seed);
    let sched = schedule(seed, COMPARISON_ITERATIONS);
    let base = NetworkConfig::toy();
    let (single, _) = pretrain_stage1(&base, &train_set, &sched).expect("pretraining");
    let score = |recursive: RecursiveInputs| {
        let mut cfg = base.clone();
        cfg.recursive = recursive;
        let mut net = two_stage(&cfg, seed, &single);
        train(&mut net, &train_set, &sched).expect("training");
        test_fscore(&net, &test_set)
    };
    (
        score(RecursiveInputs::All),
        score(RecursiveInputs::Single(base.levels())),
    )
}

fn recursive_inputs() -> Outcome {
    let (a, b, c) = thread::scope(|s| {
        let a = s.spawn(fused_reduction);
        let b = s.spawn(stepwise_vs_end_to_end);
        let c: Vec<_> = (0..COMPARISON_SEEDS)
            .map(|seed| s.spawn(move || multi_vs_single(seed)))
            .collect();
        (
            a.join().expect("reduction run"),
            b.join().expect("one-step run"),
            c.into_iter()
                .map(|h| h.join().expect("comparison run"))
                .collect::<Vec<_>>(),
        )
    });
    let wins = c.iter().filter(|(m, s)| m >= s).count();
    let per_seed: Vec<String> = c.iter().map(|(m, s)| format!("{m:.4} vs {s:.4}")).collect();
    let passed = a.0 && b.0 && wins >= COMPARISON_WINS;
    outcome(
        "recursive inputs",
        passed,
        format!(
            "{}; {}; (c) all-level >= top-level test F on {wins}/{COMPARISON_SEEDS} seeds (need {COMPARISON_WINS}) after {COMPARISON_ITERATIONS} iterations: [{}]",
            a.1,
            b.1,
            per_seed.join(", ")
        ),
    )
}

fn pipeline_closure() -> Outcome {
    let samples = synth_dataset(&SynthParams::new(64, 64, 8, 2.0), 3, 4).expect("samples");
    let probs: Vec<_> = samples.iter().map(|s| s.labels.ideal_map()).collect();
    let gts: Vec<_> = samples.iter().map(Sample::ground_truth).collect();
    let sweep = best_fscore_sweep(&probs, &gts, &default_thresholds(), 2).expect("sweep");
    let ideal_err = (sweep.best.fscore - 1.0).abs();
    let mut perfect = RandScores::from_merge_split(1.0, 1.0);
    for gt in &gts {
        let s = rand_scores(&contingency(gt, gt).expect("table")).expect("scores");
        if (s.merge, s.split, s.fscore) != (1.0, 1.0, 1.0) {
            perfect = s;
        }
    }
    let passed = ideal_err <= CLOSURE_TOL
        && (perfect.merge, perfect.split, perfect.fscore) == (1.0, 1.0, 1.0);
    outcome(
        "pipeline closure",
        passed,
        format!(
            "ideal maps give F {} (|F-1| {ideal_err:.1e} <= {CLOSURE_TOL:e}); perfect proposals give ({}, {}, {})",
            sweep.best.fscore, perfect.merge, perfect.split, perfect.fscore
        ),
    )
}

fn determinism() -> Outcome {
    let p = SynthParams::new(48, 48, 5, 1.0);
    let data = synth_dataset(&p, 11, 4).expect("samples");
    let mut sched = schedule(5, 25);
    sched.phase1.iterations = 30;
    let run = || {
        let (single, log1) =
            pretrain_stage1(&NetworkConfig::toy(), &data, &sched).expect("pretraining");
        let mut net = two_stage(&NetworkConfig::toy(), 5, &single);
        let log2 = train(&mut net, &data, &sched).expect("training");
        (
            single.to_bytes(),
            net.to_bytes(),
            log1.to_csv(),
            log2.to_csv(),
        )
    };
    let (a, b) = (run(), run());
    let passed = a == b;
    outcome(
        "determinism",
        passed,
        format!(
            "two seeded runs: checkpoints ({} and {} bytes) and loss CSVs byte-identical: {passed}",
            a.0.len(),
            a.1.len()
        ),
    )
}
