//! Run configuration: built-in profiles overlaid with a flat `key = value`
//! file (with `[section]` headers) and command-line overrides.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use m2fcn::data::SynthParams;
use m2fcn::eval::{default_thresholds, linspace_thresholds};
use m2fcn::network::{parse_levels, parse_recursive, NetworkConfig, RecursiveActivation};
use m2fcn::objective::BetaMode;
use m2fcn::pipeline::Design;
use m2fcn::trainer::{TrainMode, TrainSchedule};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value` or `[section]`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: {msg}")]
    Value { key: String, msg: String },
    #[error("unknown profile `{0}` (expected toy or paper)")]
    Profile(String),
    #[error("override `{0}` must look like section.key=value")]
    Override(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Toy,
    Paper,
}

impl FromStr for Profile {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "toy" => Ok(Profile::Toy),
            "paper" => Ok(Profile::Paper),
            _ => Err(ConfigError::Profile(s.to_string())),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Toy => "toy",
            Profile::Paper => "paper",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub train_count: usize,
    pub test_count: usize,
    pub synth: SynthParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub threads: usize,
    pub designs: Vec<Design>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub network: NetworkConfig,
    pub schedule: TrainSchedule,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

/// Every accepted key, as `section.key`.
pub const KEYS: &[&str] = &[
    "profile",
    "network.stages",
    "network.image_channels",
    "network.levels",
    "network.recursive",
    "network.recursive_activation",
    "network.learn_upsample",
    "network.beta",
    "network.alpha_side",
    "network.alpha_fuse",
    "schedule.phase1_iterations",
    "schedule.phase1_lr",
    "schedule.phase2_iterations",
    "schedule.phase2_lr",
    "schedule.mode",
    "schedule.seed",
    "schedule.snapshot_every",
    "schedule.momentum",
    "schedule.weight_decay",
    "schedule.augment",
    "data.path",
    "data.train_count",
    "data.test_count",
    "data.height",
    "data.width",
    "data.cells",
    "data.distractor_rate",
    "eval.thresholds",
    "eval.threshold_count",
    "eval.threads",
    "eval.designs",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::Value {
        key: key.to_string(),
        msg: format!(
            "cannot parse `{v}` as {}",
            std::any::type_name::<T>()
                .rsplit("::")
                .next()
                .unwrap_or("value")
        ),
    })
}

fn value_err(key: &str, e: impl fmt::Display) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        msg: e.to_string(),
    }
}

fn f64_list(key: &str, v: &str) -> Result<Vec<f64>, ConfigError> {
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let (network, schedule) = match profile {
            Profile::Toy => (NetworkConfig::toy(), TrainSchedule::toy()),
            Profile::Paper => (NetworkConfig::paper(), TrainSchedule::paper()),
        };
        Self {
            profile,
            network,
            schedule,
            data: DataConfig {
                path: None,
                train_count: 20,
                test_count: 5,
                synth: SynthParams::new(64, 64, 8, 2.0),
            },
            eval: EvalConfig {
                thresholds: default_thresholds(),
                threads: 1,
                designs: Design::ABLATION.to_vec(),
            },
        }
    }

    /// Sets one `section.key` value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let v = v.trim();
        let n = &mut self.network;
        let s = &mut self.schedule;
        match key {
            "profile" => {
                let p: Profile = v.parse()?;
                if p != self.profile {
                    return Err(value_err(key, "profile must be chosen before other keys"));
                }
            }
            "network.stages" => {
                let stages: usize = parse(key, v)?;
                *n = n.with_stages(stages);
            }
            "network.image_channels" => n.subnet.input_channels = parse(key, v)?,
            "network.levels" => {
                let levels = parse_levels(v).map_err(|e| value_err(key, e))?;
                let count = levels.len();
                n.subnet.levels = levels;
                for row in &mut n.alpha_side {
                    row.resize(count, 1.0);
                }
            }
            "network.recursive" => {
                n.recursive = parse_recursive(v).map_err(|e| value_err(key, e))?
            }
            "network.recursive_activation" => {
                n.recursive_activation = match v {
                    "sigmoid" => RecursiveActivation::Sigmoid,
                    "logit" => RecursiveActivation::Logit,
                    _ => return Err(value_err(key, "expected sigmoid or logit")),
                }
            }
            "network.learn_upsample" => n.learn_upsample = parse(key, v)?,
            "network.beta" => {
                n.beta_mode = match v {
                    "balanced" => BetaMode::Balanced,
                    "literal" => BetaMode::Literal,
                    _ => return Err(value_err(key, "expected balanced or literal")),
                }
            }
            "network.alpha_side" => {
                n.alpha_side = v
                    .split(';')
                    .map(|r| f64_list(key, r))
                    .collect::<Result<_, _>>()?
            }
            "network.alpha_fuse" => n.alpha_fuse = f64_list(key, v)?,
            "schedule.phase1_iterations" => s.phase1.iterations = parse(key, v)?,
            "schedule.phase1_lr" => s.phase1.lr = parse(key, v)?,
            "schedule.phase2_iterations" => s.phase2.iterations = parse(key, v)?,
            "schedule.phase2_lr" => s.phase2.lr = parse(key, v)?,
            "schedule.mode" => {
                s.mode = match v {
                    "end-to-end" | "end_to_end" => TrainMode::EndToEnd,
                    "stepwise" => TrainMode::Stepwise,
                    _ => return Err(value_err(key, "expected end-to-end or stepwise")),
                }
            }
            "schedule.seed" => s.seed = parse(key, v)?,
            "schedule.snapshot_every" => s.snapshot_every = parse(key, v)?,
            "schedule.momentum" => s.momentum = parse(key, v)?,
            "schedule.weight_decay" => s.weight_decay = parse(key, v)?,
            "schedule.augment" => s.augment = parse(key, v)?,
            "data.path" => self.data.path = Some(PathBuf::from(v)),
            "data.train_count" => self.data.train_count = parse(key, v)?,
            "data.test_count" => self.data.test_count = parse(key, v)?,
            "data.height" => self.data.synth.height = parse(key, v)?,
            "data.width" => self.data.synth.width = parse(key, v)?,
            "data.cells" => self.data.synth.cells = parse(key, v)?,
            "data.distractor_rate" => self.data.synth.distractor_rate = parse(key, v)?,
            "eval.thresholds" => self.eval.thresholds = f64_list(key, v)?,
            "eval.threshold_count" => {
                let count: usize = parse(key, v)?;
                self.eval.thresholds = linspace_thresholds(0.02, 0.98, count);
            }
            "eval.threads" => self.eval.threads = parse(key, v)?,
            "eval.designs" => {
                self.eval.designs = v
                    .split(',')
                    .map(|d| Design::parse(d).map_err(|e| value_err(key, e)))
                    .collect::<Result<_, _>>()?
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies `section.key=value`.
    pub fn apply_override(&mut self, text: &str) -> Result<(), ConfigError> {
        let (k, v) = text
            .split_once('=')
            .ok_or_else(|| ConfigError::Override(text.to_string()))?;
        self.set(k.trim(), v)
    }

    /// Cross-field checks.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.network
            .validate()
            .map_err(|e| value_err("network", e))?;
        self.schedule
            .validate()
            .map_err(|e| value_err("schedule", e))?;
        if self.eval.thresholds.is_empty()
            || self
                .eval
                .thresholds
                .iter()
                .any(|t| !(0.0..=1.0).contains(t))
        {
            return Err(value_err(
                "eval.thresholds",
                "need at least one threshold, all in [0, 1]",
            ));
        }
        if self.eval.threads == 0 {
            return Err(value_err("eval.threads", "must be at least 1"));
        }
        Ok(())
    }
}

/// Profile requested by a config file, if any, and its `(section.key, value)` entries.
pub type ParsedFile = (Option<Profile>, Vec<(String, String)>);

pub fn parse_file(text: &str) -> Result<ParsedFile, ConfigError> {
    let mut section = String::new();
    let mut entries = Vec::new();
    let mut profile = None;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: n + 1,
            text: raw.to_string(),
        })?;
        let key = if section.is_empty() {
            k.trim().to_string()
        } else {
            format!("{section}.{}", k.trim())
        };
        if !KEYS.contains(&key.as_str()) {
            return Err(ConfigError::UnknownKey(key));
        }
        if key == "profile" {
            profile = Some(v.trim().parse()?);
        } else {
            entries.push((key, v.trim().to_string()));
        }
    }
    Ok((profile, entries))
}

/// Layers, lowest precedence first: profile defaults, file values,
/// `M2FCN_SEED`, `--set` overrides in order.
pub fn resolve(
    profile_flag: Option<Profile>,
    file: Option<&str>,
    env_seed: Option<&str>,
    overrides: &[String],
) -> Result<RunConfig, ConfigError> {
    let (file_profile, entries) = match file {
        Some(text) => parse_file(text)?,
        None => (None, Vec::new()),
    };
    let profile = profile_flag.or(file_profile).unwrap_or(Profile::Toy);
    let mut cfg = RunConfig::profile(profile);
    for (k, v) in &entries {
        cfg.set(k, v)?;
    }
    if let Some(seed) = env_seed {
        cfg.set("schedule.seed", seed)
            .map_err(|_| value_err("M2FCN_SEED", format!("`{seed}` is not an integer")))?;
    }
    for o in overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}
