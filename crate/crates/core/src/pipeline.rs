//! Evaluation of trained networks and the design comparison.
//!
//! Designs share one pre-trained first stage per sub-net ladder, so the
//! comparison isolates the multi-stage choices.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;

use crate::data::Sample;
use crate::error::{invalid, Result};
use crate::eval::{best_fscore_sweep, SweepResult};
use crate::network::{M2fcn, NetworkConfig, RecursiveInputs};
use crate::trainer::{pretrain_stage1, train, TrainMode, TrainSchedule};

/// Probability maps of `net` on every sample.
pub fn predict_all(net: &M2fcn, samples: &[Sample]) -> Result<Vec<crate::tensor::Tensor>> {
    samples.iter().map(|s| net.predict(&s.image)).collect()
}

/// Threshold sweep of `net` against the samples' ground truth.
pub fn evaluate(
    net: &M2fcn,
    samples: &[Sample],
    thresholds: &[f64],
    threads: usize,
) -> Result<SweepResult> {
    let probs = predict_all(net, samples)?;
    let gts: Vec<_> = samples.iter().map(Sample::ground_truth).collect();
    best_fscore_sweep(&probs, &gts, thresholds, threads)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Design {
    /// The pre-trained single-stage network.
    Pretrained,
    /// One stage trained for both phases.
    I,
    /// Two stages with the last level removed.
    II,
    /// Two stages, only the top-level side output forwarded.
    III,
    /// Two stages, only the second-highest level forwarded.
    IV,
    /// Two stages, stage 1 frozen.
    V,
    /// Two stages, end to end, all side outputs forwarded.
    VI,
    /// Three stages, end to end.
    VII,
}

impl Design {
    pub const ALL: [Design; 8] = [
        Design::Pretrained,
        Design::I,
        Design::II,
        Design::III,
        Design::IV,
        Design::V,
        Design::VI,
        Design::VII,
    ];

    /// The recursive-input and training-mode comparison.
    pub const ABLATION: [Design; 4] = [Design::III, Design::IV, Design::V, Design::VI];

    pub fn parse(s: &str) -> Result<Design> {
        let key = s.trim().to_ascii_uppercase();
        let key = key.strip_prefix("AD_").unwrap_or(&key);
        Design::ALL
            .into_iter()
            .find(|d| d.short().eq_ignore_ascii_case(key))
            .ok_or_else(|| invalid(format!("unknown design `{s}`")))
    }

    fn short(self) -> &'static str {
        match self {
            Design::Pretrained => "pretrained",
            Design::I => "I",
            Design::II => "II",
            Design::III => "III",
            Design::IV => "IV",
            Design::V => "V",
            Design::VI => "VI",
            Design::VII => "VII",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Design::Pretrained => "pre-trained single stage",
            Design::I => "1 stage",
            Design::II => "2 stages, one level fewer, end-to-end",
            Design::III => "2 stages, end-to-end, single recursive input (top level)",
            Design::IV => "2 stages, end-to-end, single recursive input (level N-1)",
            Design::V => "2 stages, stepwise",
            Design::VI => "2 stages, end-to-end, all recursive inputs",
            Design::VII => "3 stages, end-to-end, all recursive inputs",
        }
    }

    /// Network and schedule for this design, derived from `base`.
    pub fn configure(
        self,
        base: &NetworkConfig,
        schedule: &TrainSchedule,
    ) -> Result<(NetworkConfig, TrainSchedule)> {
        let n = base.levels();
        let mut cfg = base.with_stages(2);
        let mut sched = schedule.clone();
        sched.mode = TrainMode::EndToEnd;
        cfg.recursive = RecursiveInputs::All;
        match self {
            Design::Pretrained | Design::I => cfg = base.with_stages(1),
            Design::II => {
                if n < 2 {
                    return Err(invalid("design II needs at least two levels"));
                }
                cfg.subnet.levels.pop();
                for row in &mut cfg.alpha_side {
                    row.pop();
                }
            }
            Design::III => cfg.recursive = RecursiveInputs::Single(n),
            Design::IV => {
                if n < 2 {
                    return Err(invalid("design IV needs at least two levels"));
                }
                cfg.recursive = RecursiveInputs::Single(n - 1);
            }
            Design::V => sched.mode = TrainMode::Stepwise,
            Design::VI => {}
            Design::VII => cfg = base.with_stages(3),
        }
        Ok((cfg, sched))
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Design::Pretrained => f.write_str("pretrained"),
            d => write!(f, "AD_{}", d.short()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub design: Design,
    pub sweep: SweepResult,
}

/// Trains and scores every design. Stage-1 pre-training runs once per
/// distinct level ladder.
pub fn run_ablation(
    base: &NetworkConfig,
    schedule: &TrainSchedule,
    train_set: &[Sample],
    test_set: &[Sample],
    designs: &[Design],
    thresholds: &[f64],
    threads: usize,
) -> Result<Vec<AblationRow>> {
    if designs.is_empty() {
        return Err(invalid("no designs selected"));
    }
    let mut pretrained: BTreeMap<String, M2fcn> = BTreeMap::new();
    let mut rows = Vec::with_capacity(designs.len());
    for &design in designs {
        let (cfg, sched) = design.configure(base, schedule)?;
        let key = cfg.with_stages(1).to_text();
        if !pretrained.contains_key(&key) {
            let (net, _) = pretrain_stage1(&cfg, train_set, &sched)?;
            pretrained.insert(key.clone(), net);
        }
        let single = &pretrained[&key];
        let net = match design {
            Design::Pretrained => single.clone(),
            _ => {
                let mut net = M2fcn::new(&cfg, sched.seed)?;
                net.init_stage1_from(single)?;
                train(&mut net, train_set, &sched)?;
                net
            }
        };
        rows.push(AblationRow {
            design,
            sweep: evaluate(&net, test_set, thresholds, threads)?,
        });
    }
    Ok(rows)
}

/// Plain-text score table, one row per design.
pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<12} {:>9} {:>10} {:>10} {:>9}  {}\n",
        "design", "fscore", "merge", "split", "thresh", "description"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<12} {:>9.4} {:>10.4} {:>10.4} {:>9.3}  {}",
            r.design.to_string(),
            r.sweep.best.fscore,
            r.sweep.best.merge,
            r.sweep.best.split,
            r.sweep.best_threshold,
            r.design.description()
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthParams};
    use crate::eval::default_thresholds;
    use crate::trainer::Phase;

    #[test]
    fn design_configs() {
        let base = NetworkConfig::toy();
        let s = TrainSchedule::toy();
        let (c, _) = Design::III.configure(&base, &s).unwrap();
        assert_eq!((c.stages, c.recursive), (2, RecursiveInputs::Single(3)));
        let (c, _) = Design::IV.configure(&base, &s).unwrap();
        assert_eq!(c.recursive, RecursiveInputs::Single(2));
        let (_, sched) = Design::V.configure(&base, &s).unwrap();
        assert_eq!(sched.mode, TrainMode::Stepwise);
        let (c, _) = Design::II.configure(&base, &s).unwrap();
        assert_eq!((c.levels(), c.alpha_side[1].len()), (2, 2));
        c.validate().unwrap();
        assert_eq!(Design::VII.configure(&base, &s).unwrap().0.stages, 3);
        assert_eq!(Design::I.configure(&base, &s).unwrap().0.stages, 1);
    }

    #[test]
    fn design_names_round_trip() {
        for d in Design::ALL {
            assert_eq!(Design::parse(&d.to_string()).unwrap(), d);
        }
        assert_eq!(Design::parse("vi").unwrap(), Design::VI);
        assert!(Design::parse("AD_IX").is_err());
    }

    #[test]
    fn small_ablation_table() {
        let data = synth_dataset(&SynthParams::new(32, 32, 3, 0.0), 3, 3).unwrap();
        let mut sched = TrainSchedule::toy();
        sched.phase1 = Phase {
            iterations: 3,
            lr: 1e-5,
        };
        sched.phase2 = Phase {
            iterations: 2,
            lr: 1e-5,
        };
        let designs = [Design::Pretrained, Design::III, Design::VI];
        let rows = run_ablation(
            &NetworkConfig::toy(),
            &sched,
            &data[..2],
            &data[2..],
            &designs,
            &default_thresholds(),
            1,
        )
        .unwrap();
        assert_eq!(rows.len(), 3);
        let table = format_ablation(&rows);
        assert_eq!(table.lines().count(), 4);
        assert!(table.contains("AD_III") && table.contains("AD_VI"));
    }
}
