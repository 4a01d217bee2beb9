use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use m2fcn::data::{load_image, synth_dataset, write_image, write_pgm, Dataset, Sample, Split};
use m2fcn::eval::best_fscore_sweep;
use m2fcn::gradcheck::{network_check, run_suite, SUITE_TOLERANCE};
use m2fcn::network::M2fcn;
use m2fcn::pipeline::{evaluate, format_ablation, predict_all, run_ablation};
use m2fcn::trainer::{pretrain_stage1, train_with_snapshots, TrainLog};

use crate::config::RunConfig;
use crate::{Command, GlobalArgs, SplitArg};

pub fn run(global: &GlobalArgs, command: &Command) -> Result<()> {
    let cfg = global.resolve()?;
    match command {
        Command::Synth => synth(&cfg, out_dir(global)?),
        Command::Train => train(&cfg, out_dir(global)?),
        Command::Predict { model, split } => predict(&cfg, out_dir(global)?, model, *split),
        Command::Eval { model, pred, split } => eval(
            &cfg,
            out_dir(global)?,
            model.as_deref(),
            pred.as_deref(),
            *split,
        ),
        Command::Gradcheck { seeds, per_param } => {
            gradcheck(global.out.as_deref(), *seeds, *per_param)
        }
        Command::Ablate => ablate(&cfg, out_dir(global)?),
    }
}

fn out_dir(global: &GlobalArgs) -> Result<&Path> {
    global
        .out
        .as_deref()
        .context("this command needs --out <DIR>")
}

fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

/// Writes `bytes` next to `path` with a `.partial` suffix, then renames.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = partial_path(path);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming {}", tmp.display()))?;
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg
        .data
        .path
        .as_deref()
        .context("no dataset: pass --data <DIR> or set data.path")?;
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn select(ds: &Dataset, split: SplitArg) -> (Vec<Sample>, Vec<String>) {
    let parts: &[Split] = match split {
        SplitArg::Train => &[Split::Train],
        SplitArg::Test => &[Split::Test],
        SplitArg::All => &[Split::Train, Split::Test],
    };
    let mut samples = Vec::new();
    let mut stems = Vec::new();
    for &p in parts {
        let (s, n) = ds.split(p);
        samples.extend_from_slice(s);
        stems.extend_from_slice(n);
    }
    (samples, stems)
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        bail!("{} already exists and is not empty", out.display());
    }
    let d = &cfg.data;
    let all = synth_dataset(&d.synth, cfg.schedule.seed, d.train_count + d.test_count)?;
    let test = all[d.train_count..].to_vec();
    let mut train = all;
    train.truncate(d.train_count);
    let ds = Dataset::new(train, test);
    let tmp = partial_path(out);
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    ds.save(&tmp)?;
    if out.exists() {
        fs::remove_dir(out)?;
    }
    fs::rename(&tmp, out)?;
    println!(
        "wrote {} train / {} test samples to {}",
        d.train_count,
        d.test_count,
        out.display()
    );
    Ok(())
}

fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = load_dataset(cfg)?;
    if ds.train.is_empty() {
        bail!("dataset has no training samples");
    }
    fs::create_dir_all(out.join("snapshots"))?;
    let sched = &cfg.schedule;
    eprintln!(
        "pre-training stage 1 for {} iterations",
        sched.phase1.iterations
    );
    let (single, log1) = pretrain_stage1(&cfg.network, &ds.train, sched)?;
    write_atomic(&out.join("pretrain.ckpt"), &single.to_bytes())?;
    write_atomic(&out.join("loss_pretrain.csv"), log1.to_csv().as_bytes())?;

    let mut net = M2fcn::new(&cfg.network, sched.seed)?;
    net.init_stage1_from(&single)?;
    let log2 = if cfg.network.stages > 1 {
        eprintln!(
            "training {} stages for {} iterations",
            cfg.network.stages, sched.phase2.iterations
        );
        let snaps = out.join("snapshots");
        let mut on_snapshot = |it: usize, n: &M2fcn| -> m2fcn::Result<()> {
            let path = snaps.join(format!("iter_{it:06}.ckpt"));
            write_atomic(&path, &n.to_bytes())
                .map_err(|e| m2fcn::Error::Io(std::io::Error::other(e.to_string())))?;
            eprintln!("iteration {it}: snapshot written");
            Ok(())
        };
        match train_with_snapshots(&mut net, &ds.train, sched, &mut on_snapshot) {
            Ok(log) => log,
            Err(m2fcn::Error::Diverged { iteration, best }) => {
                write_atomic(&out.join("best.ckpt"), &best.to_bytes())?;
                bail!("training diverged at iteration {iteration}; best parameters saved to best.ckpt");
            }
            Err(e) => return Err(e.into()),
        }
    } else {
        TrainLog::default()
    };
    write_atomic(&out.join("loss.csv"), log2.to_csv().as_bytes())?;
    write_atomic(&out.join("model.ckpt"), &net.to_bytes())?;
    let tail = log2
        .tail_mean(50)
        .or(log1.tail_mean(50))
        .unwrap_or(f64::NAN);
    println!(
        "trained model written to {} (final mean loss {tail:.4})",
        out.join("model.ckpt").display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<M2fcn> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    M2fcn::load(bytes.as_slice()).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn predict(cfg: &RunConfig, out: &Path, model: &Path, split: SplitArg) -> Result<()> {
    let net = load_model(model)?;
    let ds = load_dataset(cfg)?;
    let (samples, stems) = select(&ds, split);
    fs::create_dir_all(out)?;
    for (map, stem) in predict_all(&net, &samples)?.iter().zip(&stems) {
        let mut bytes = Vec::new();
        write_pgm(&write_image(map)?, &mut bytes)?;
        write_atomic(&out.join(format!("{stem}.pgm")), &bytes)?;
    }
    println!(
        "wrote {} probability maps to {}",
        stems.len(),
        out.display()
    );
    Ok(())
}

fn eval(
    cfg: &RunConfig,
    out: &Path,
    model: Option<&Path>,
    pred: Option<&Path>,
    split: SplitArg,
) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let (samples, stems) = select(&ds, split);
    if samples.is_empty() {
        bail!("selected split is empty");
    }
    let sweep = match (model, pred) {
        (Some(m), _) => evaluate(
            &load_model(m)?,
            &samples,
            &cfg.eval.thresholds,
            cfg.eval.threads,
        )?,
        (None, Some(dir)) => {
            let maps = stems
                .iter()
                .map(|s| {
                    let p = dir.join(format!("{s}.pgm"));
                    load_image(&p).with_context(|| format!("loading {}", p.display()))
                })
                .collect::<Result<Vec<_>>>()?;
            let gts: Vec<_> = samples.iter().map(Sample::ground_truth).collect();
            best_fscore_sweep(&maps, &gts, &cfg.eval.thresholds, cfg.eval.threads)?
        }
        (None, None) => bail!("eval needs --model or --pred"),
    };
    fs::create_dir_all(out)?;
    write_atomic(&out.join("pr.csv"), sweep.to_csv().as_bytes())?;
    let summary = format!(
        "fscore {:?}\nmerge {:?}\nsplit {:?}\nthreshold {:?}\n",
        sweep.best.fscore, sweep.best.merge, sweep.best.split, sweep.best_threshold
    );
    write_atomic(&out.join("scores.txt"), summary.as_bytes())?;
    print!("{summary}");
    Ok(())
}

fn gradcheck(out: Option<&Path>, seeds: u64, per_param: usize) -> Result<()> {
    let mut report = String::new();
    let mut worst: f64 = 0.0;
    let mut failed = 0;
    for seed in 0..seeds {
        let mut entries = run_suite(seed)?;
        entries.retain(|e| e.name != "two-stage network");
        let net = network_check(seed, per_param)?;
        let rows = entries
            .iter()
            .map(|e| (e.name.clone(), e.report.clone()))
            .chain(std::iter::once(("two-stage network".to_string(), net)));
        for (name, r) in rows {
            let ok = r.checked > 0 && r.max_rel_error <= SUITE_TOLERANCE;
            if !ok {
                failed += 1;
            }
            worst = worst.max(r.max_rel_error);
            report.push_str(&format!(
                "seed {seed} {:<28} max rel error {:.3e} checked {:>5} skipped {:>4} {}\n",
                name,
                r.max_rel_error,
                r.checked,
                r.skipped,
                if ok { "ok" } else { "FAIL" }
            ));
        }
    }
    report.push_str(&format!(
        "max rel error {worst:.3e} (tolerance {SUITE_TOLERANCE:e})\n"
    ));
    print!("{report}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join("gradcheck.txt"), report.as_bytes())?;
    }
    if failed > 0 {
        bail!("{failed} gradient checks exceeded the tolerance");
    }
    Ok(())
}

fn ablate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = load_dataset(cfg)?;
    if ds.train.is_empty() || ds.test.is_empty() {
        bail!("ablation needs both train and test samples");
    }
    let rows = run_ablation(
        &cfg.network,
        &cfg.schedule,
        &ds.train,
        &ds.test,
        &cfg.eval.designs,
        &cfg.eval.thresholds,
        cfg.eval.threads,
    )?;
    let table = format_ablation(&rows);
    fs::create_dir_all(out)?;
    write_atomic(&out.join("ablation.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}
