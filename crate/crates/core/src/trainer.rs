//! SGD with momentum and weight decay, stage-1 pre-training and the two
//! multi-stage training modes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Sample, Transform};
use crate::error::{invalid, Error, Result};
use crate::graph::{Gradients, Graph, ParamId};
use crate::network::{M2fcn, NetworkConfig};
use crate::objective::total_loss;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Momentum buffers plus hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<ParamId, Tensor>,
}

impl OptimState {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self, id: ParamId) -> Option<&Tensor> {
        self.velocity.get(&id)
    }
}

/// `v ← μv − lr(g + λp)`, `p ← p + v` for every trainable parameter.
/// Missing gradients count as zero. Nothing is modified if any gradient is
/// non-finite.
pub fn sgd_step(store: &mut ParamStore, grads: &Gradients, state: &mut OptimState) -> Result<()> {
    for (id, g) in grads.iter() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                param: store.entry(id).name.clone(),
            });
        }
    }
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let entry = store.entry_mut(id);
        let grad = grads.get(id);
        if let Some(g) = grad {
            if g.shape() != entry.value.shape() {
                return Err(invalid(format!(
                    "gradient shape {:?} for `{}` of shape {:?}",
                    g.shape(),
                    entry.name,
                    entry.value.shape()
                )));
            }
        }
        let v = state
            .velocity
            .entry(id)
            .or_insert_with(|| Tensor::zeros(entry.value.shape()));
        let p = entry.value.data_mut();
        for (k, (vk, pk)) in v.data_mut().iter_mut().zip(p.iter_mut()).enumerate() {
            let gk = grad.map_or(0.0, |g| g.data()[k]);
            *vk = state.momentum * *vk - state.lr * (gk + state.weight_decay * *pk);
            *pk += *vk;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TrainMode {
    /// All stages are updated jointly.
    #[default]
    EndToEnd,
    /// Stage-1 parameters stay fixed while later stages train.
    Stepwise,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Phase {
    pub iterations: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    /// Single-stage pre-training.
    pub phase1: Phase,
    /// Multi-stage training.
    pub phase2: Phase,
    pub mode: TrainMode,
    pub seed: u64,
    /// Iterations between snapshots; 0 disables them.
    pub snapshot_every: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Cycle through all 36 transformed copies of every sample.
    pub augment: bool,
}

impl TrainSchedule {
    /// Desk-scale defaults for the toy network.
    pub fn toy() -> Self {
        Self {
            phase1: Phase {
                iterations: 500,
                lr: 2e-5,
            },
            phase2: Phase {
                iterations: 150,
                lr: 2e-5,
            },
            mode: TrainMode::EndToEnd,
            seed: 0,
            snapshot_every: 50,
            momentum: 0.9,
            weight_decay: 2e-4,
            augment: false,
        }
    }

    /// Iteration counts and rates for the full-size network.
    pub fn paper() -> Self {
        Self {
            phase1: Phase {
                iterations: 20_000,
                lr: 1e-8,
            },
            phase2: Phase {
                iterations: 10_000,
                lr: 1e-9,
            },
            mode: TrainMode::EndToEnd,
            seed: 0,
            snapshot_every: 1000,
            momentum: 0.9,
            weight_decay: 2e-4,
            augment: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("phase1", self.phase1), ("phase2", self.phase2)] {
            if !(p.lr > 0.0 && p.lr.is_finite()) {
                return Err(invalid(format!("{name} learning rate must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid("weight decay must be non-negative"));
        }
        Ok(())
    }
}

/// Losses of one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    /// Fused-output loss per stage.
    pub fused: Vec<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LossRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let stages = self.records.first().map_or(0, |r| r.fused.len());
        let mut s = String::from("iteration");
        for m in 1..=stages {
            let _ = write!(s, ",fused_{m}");
        }
        s.push_str(",total\n");
        for r in &self.records {
            let _ = write!(s, "{}", r.iteration);
            for f in &r.fused {
                let _ = write!(s, ",{f}");
            }
            let _ = writeln!(s, ",{}", r.total);
        }
        s
    }

    /// Mean total loss over the last `window` records.
    pub fn tail_mean(&self, window: usize) -> Option<f64> {
        let n = window.min(self.records.len());
        (n > 0).then(|| {
            self.records[self.records.len() - n..]
                .iter()
                .map(|r| r.total)
                .sum::<f64>()
                / n as f64
        })
    }
}

/// Per-sample losses of a network, without updating anything.
pub fn evaluate_losses(net: &M2fcn, samples: &[Sample]) -> Result<Vec<LossRecord>> {
    samples
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let mut g = Graph::new();
            let outs = net.forward_all(&mut g, &s.image)?;
            let terms = total_loss(&mut g, &outs, &s.labels, net.config())?;
            Ok(LossRecord {
                iteration: k,
                fused: terms.fused.iter().map(|&v| g.value(v).data()[0]).collect(),
                total: g.value(terms.total).data()[0],
            })
        })
        .collect()
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::NonFiniteGradient { .. })
}

/// One forward/backward/update on `sample`.
fn train_step(
    net: &mut M2fcn,
    sample: &Sample,
    state: &mut OptimState,
    iteration: usize,
) -> Result<LossRecord> {
    let mut g = Graph::new();
    let outs = net.forward_all(&mut g, &sample.image)?;
    let terms = total_loss(&mut g, &outs, &sample.labels, net.config())?;
    let grads = g.backward(terms.total)?;
    sgd_step(net.params_mut(), &grads, state)?;
    Ok(LossRecord {
        iteration,
        fused: terms.fused.iter().map(|&v| g.value(v).data()[0]).collect(),
        total: g.value(terms.total).data()[0],
    })
}

/// Runs `phase` on `net`. Samples are visited in a fresh seeded shuffle
/// each epoch. `on_snapshot` sees the network every `snapshot_every`
/// iterations. On divergence the network with the lowest snapshot-window
/// loss is returned inside [`Error::Diverged`].
fn run_phase(
    net: &mut M2fcn,
    data: &[Sample],
    phase: Phase,
    schedule: &TrainSchedule,
    stream: u64,
    on_snapshot: &mut dyn FnMut(usize, &M2fcn) -> Result<()>,
) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let transforms = if schedule.augment {
        Transform::all()
    } else {
        vec![Transform::IDENTITY]
    };
    let pool = data.len() * transforms.len();
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    rng.set_stream(stream);
    let mut order: Vec<usize> = Vec::new();
    let mut state = OptimState::new(phase.lr, schedule.momentum, schedule.weight_decay);
    let mut log = TrainLog::default();
    let window = if schedule.snapshot_every > 0 {
        schedule.snapshot_every
    } else {
        phase.iterations.max(1)
    };
    let mut best: (f64, M2fcn) = (f64::INFINITY, net.clone());

    for it in 1..=phase.iterations {
        if order.is_empty() {
            order = (0..pool).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let k = order.pop().expect("refilled above");
        let t = transforms[k % transforms.len()];
        let owned;
        let sample = if t == Transform::IDENTITY {
            &data[k / transforms.len()]
        } else {
            owned = t.apply(&data[k / transforms.len()]);
            &owned
        };
        match train_step(net, sample, &mut state, it) {
            Ok(rec) => log.records.push(rec),
            Err(e) if is_divergence(&e) => {
                return Err(Error::Diverged {
                    iteration: it,
                    best: Box::new(best.1),
                })
            }
            Err(e) => return Err(e),
        }
        if it % window == 0 {
            let mean = log.tail_mean(window).expect("records exist");
            if mean < best.0 {
                best = (mean, net.clone());
            }
        }
        if schedule.snapshot_every > 0 && it % schedule.snapshot_every == 0 {
            on_snapshot(it, net)?;
        }
    }
    Ok(log)
}

/// Trains a single-stage network with the phase-1 settings. Its stage-1
/// parameters match a multi-stage network built from the same seed before
/// training.
pub fn pretrain_stage1(
    config: &NetworkConfig,
    data: &[Sample],
    schedule: &TrainSchedule,
) -> Result<(M2fcn, TrainLog)> {
    schedule.validate()?;
    let mut net = M2fcn::new(&config.with_stages(1), schedule.seed)?;
    let log = run_phase(&mut net, data, schedule.phase1, schedule, 1, &mut |_, _| {
        Ok(())
    })?;
    Ok((net, log))
}

/// Phase-2 training of a multi-stage network.
pub fn train(net: &mut M2fcn, data: &[Sample], schedule: &TrainSchedule) -> Result<TrainLog> {
    train_with_snapshots(net, data, schedule, &mut |_, _| Ok(()))
}

pub fn train_with_snapshots(
    net: &mut M2fcn,
    data: &[Sample],
    schedule: &TrainSchedule,
    on_snapshot: &mut dyn FnMut(usize, &M2fcn) -> Result<()>,
) -> Result<TrainLog> {
    schedule.validate()?;
    let frozen = match schedule.mode {
        TrainMode::EndToEnd => Vec::new(),
        TrainMode::Stepwise => {
            if net.config().stages < 2 {
                return Err(invalid("stepwise training needs at least two stages"));
            }
            net.params_mut().freeze_prefix("stage1.")
        }
    };
    let result = run_phase(net, data, schedule.phase2, schedule, 2, on_snapshot);
    net.params_mut().unfreeze(&frozen);
    match result {
        Err(Error::Diverged {
            iteration,
            mut best,
        }) => {
            best.params_mut().unfreeze(&frozen);
            Err(Error::Diverged { iteration, best })
        }
        other => other,
    }
}

/// Pre-trains stage 1 and trains the full network, returning both logs.
pub fn fit(
    config: &NetworkConfig,
    data: &[Sample],
    schedule: &TrainSchedule,
) -> Result<(M2fcn, TrainLog, TrainLog)> {
    let (single, log1) = pretrain_stage1(config, data, schedule)?;
    let mut net = M2fcn::new(config, schedule.seed)?;
    net.init_stage1_from(&single)?;
    let log2 = if config.stages > 1 {
        train(&mut net, data, schedule)?
    } else {
        TrainLog::default()
    };
    Ok((net, log1, log2))
}
