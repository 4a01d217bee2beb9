//! The full multi-stage network.
//!
//! Stage 1 sees the image alone. Stage `m ≥ 2` sees the image stacked with
//! the (sigmoid-activated by default) side outputs of stage `m-1`, either all
//! of them or a single selected level. Each stage fuses its side logits with
//! a learned weight vector; the fused logits of the last stage give the
//! prediction.

use std::fmt::Write as _;
use std::io::{Read, Write};

use crate::error::{invalid, shape_err, Error, Result};
use crate::graph::{Graph, ParamId, Var};
use crate::objective::BetaMode;
use crate::params::ParamStore;
use crate::subnet::{LevelSpec, SubNet, SubNetConfig};
use crate::tensor::Tensor;

/// Which side outputs of the previous stage feed the next one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecursiveInputs {
    All,
    /// A single 1-based level.
    Single(usize),
}

impl RecursiveInputs {
    pub fn count(self, levels: usize) -> usize {
        match self {
            Self::All => levels,
            Self::Single(_) => 1,
        }
    }
}

/// Whether forwarded side outputs are passed as probabilities or logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RecursiveActivation {
    #[default]
    Sigmoid,
    Logit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub stages: usize,
    /// Ladder of every stage; `input_channels` is the image channel count.
    pub subnet: SubNetConfig,
    pub recursive: RecursiveInputs,
    pub recursive_activation: RecursiveActivation,
    /// `α_{m,n}`, indexed `[m][n]`.
    pub alpha_side: Vec<Vec<f64>>,
    /// `α_{f,m}`.
    pub alpha_fuse: Vec<f64>,
    pub learn_upsample: bool,
    pub beta_mode: BetaMode,
}

impl NetworkConfig {
    /// All loss weights 1, every side output forwarded.
    pub fn new(stages: usize, subnet: SubNetConfig) -> Self {
        let n = subnet.levels.len();
        Self {
            stages,
            subnet,
            recursive: RecursiveInputs::All,
            recursive_activation: RecursiveActivation::Sigmoid,
            alpha_side: vec![vec![1.0; n]; stages],
            alpha_fuse: vec![1.0; stages],
            learn_upsample: false,
            beta_mode: BetaMode::Balanced,
        }
    }

    pub fn toy() -> Self {
        Self::new(2, SubNetConfig::toy(1))
    }

    pub fn paper() -> Self {
        Self::new(3, SubNetConfig::paper(1))
    }

    pub fn levels(&self) -> usize {
        self.subnet.levels.len()
    }

    pub fn image_channels(&self) -> usize {
        self.subnet.input_channels
    }

    /// Same network with a different stage count; loss weights are resized
    /// by repeating the last stage's row.
    pub fn with_stages(&self, stages: usize) -> Self {
        let mut c = self.clone();
        c.stages = stages;
        let n = self.levels();
        let last_side = self
            .alpha_side
            .last()
            .cloned()
            .unwrap_or_else(|| vec![1.0; n]);
        let last_fuse = self.alpha_fuse.last().copied().unwrap_or(1.0);
        c.alpha_side.resize(stages, last_side);
        c.alpha_fuse.resize(stages, last_fuse);
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.subnet.validate()?;
        let n = self.levels();
        if self.stages == 0 {
            return Err(invalid("network needs at least one stage"));
        }
        if let RecursiveInputs::Single(l) = self.recursive {
            if l == 0 || l > n {
                return Err(invalid(format!("recursive input level {l} not in 1..={n}")));
            }
        }
        if self.alpha_side.len() != self.stages || self.alpha_side.iter().any(|r| r.len() != n) {
            return Err(invalid(format!("alpha_side must be {}×{n}", self.stages)));
        }
        if self.alpha_fuse.len() != self.stages {
            return Err(invalid(format!(
                "alpha_fuse must have {} entries",
                self.stages
            )));
        }
        let all_alpha = self.alpha_side.iter().flatten().chain(&self.alpha_fuse);
        if all_alpha.clone().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }

    /// Input channels of 0-based stage `m`.
    pub fn stage_input_channels(&self, m: usize) -> usize {
        if m == 0 {
            self.image_channels()
        } else {
            self.image_channels() + self.recursive.count(self.levels())
        }
    }

    /// Line-oriented `key = value` form stored in checkpoints.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let levels: Vec<String> = self
            .subnet
            .levels
            .iter()
            .map(|l| format!("{}x{}x{}", l.convs, l.channels, l.kernel))
            .collect();
        let rows: Vec<String> = self.alpha_side.iter().map(|r| join_f64(r, ",")).collect();
        let _ = writeln!(s, "stages = {}", self.stages);
        let _ = writeln!(s, "image_channels = {}", self.image_channels());
        let _ = writeln!(s, "levels = {}", levels.join(","));
        let _ = writeln!(s, "recursive = {}", format_recursive(self.recursive));
        let _ = writeln!(
            s,
            "recursive_activation = {}",
            match self.recursive_activation {
                RecursiveActivation::Sigmoid => "sigmoid",
                RecursiveActivation::Logit => "logit",
            }
        );
        let _ = writeln!(s, "learn_upsample = {}", self.learn_upsample);
        let _ = writeln!(
            s,
            "beta = {}",
            match self.beta_mode {
                BetaMode::Balanced => "balanced",
                BetaMode::Literal => "literal",
            }
        );
        let _ = writeln!(s, "alpha_side = {}", rows.join(";"));
        let _ = writeln!(s, "alpha_fuse = {}", join_f64(&self.alpha_fuse, ","));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut stages = None;
        let mut channels = None;
        let mut levels = None;
        let mut cfg_rest: Vec<(String, String)> = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad config line `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "stages" => stages = Some(parse_usize(k, v)?),
                "image_channels" => channels = Some(parse_usize(k, v)?),
                "levels" => levels = Some(parse_levels(v)?),
                _ => cfg_rest.push((k.to_string(), v.to_string())),
            }
        }
        let missing = |k: &str| Error::Checkpoint(format!("config is missing `{k}`"));
        let subnet = SubNetConfig {
            levels: levels.ok_or_else(|| missing("levels"))?,
            input_channels: channels.ok_or_else(|| missing("image_channels"))?,
        };
        let mut cfg = NetworkConfig::new(stages.ok_or_else(|| missing("stages"))?, subnet);
        for (k, v) in cfg_rest {
            match k.as_str() {
                "recursive" => cfg.recursive = parse_recursive(&v)?,
                "recursive_activation" => {
                    cfg.recursive_activation = match v.as_str() {
                        "sigmoid" => RecursiveActivation::Sigmoid,
                        "logit" => RecursiveActivation::Logit,
                        _ => return Err(invalid(format!("recursive_activation `{v}`"))),
                    }
                }
                "learn_upsample" => {
                    cfg.learn_upsample = v
                        .parse()
                        .map_err(|_| invalid(format!("learn_upsample `{v}`")))?
                }
                "beta" => {
                    cfg.beta_mode = match v.as_str() {
                        "balanced" => BetaMode::Balanced,
                        "literal" => BetaMode::Literal,
                        _ => return Err(invalid(format!("beta `{v}`"))),
                    }
                }
                "alpha_side" => {
                    cfg.alpha_side = v
                        .split(';')
                        .map(|r| parse_f64_list("alpha_side", r))
                        .collect::<Result<_>>()?
                }
                "alpha_fuse" => cfg.alpha_fuse = parse_f64_list("alpha_fuse", &v)?,
                _ => return Err(Error::Checkpoint(format!("unknown config key `{k}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn join_f64(v: &[f64], sep: &str) -> String {
    v.iter()
        .map(|x| format!("{x:?}"))
        .collect::<Vec<_>>()
        .join(sep)
}

pub fn format_recursive(r: RecursiveInputs) -> String {
    match r {
        RecursiveInputs::All => "all".into(),
        RecursiveInputs::Single(l) => format!("single:{l}"),
    }
}

pub fn parse_recursive(v: &str) -> Result<RecursiveInputs> {
    match v {
        "all" => Ok(RecursiveInputs::All),
        _ => v
            .strip_prefix("single:")
            .and_then(|l| l.trim().parse().ok())
            .map(RecursiveInputs::Single)
            .ok_or_else(|| {
                invalid(format!(
                    "recursive inputs `{v}` (expected all | single:<level>)"
                ))
            }),
    }
}

/// Parses `convs x channels x kernel` triples, e.g. `2x8x3,2x16x3`.
pub fn parse_levels(v: &str) -> Result<Vec<LevelSpec>> {
    v.split(',')
        .map(|item| {
            let parts: Vec<&str> = item.trim().split('x').collect();
            let nums: Option<Vec<usize>> = parts.iter().map(|p| p.trim().parse().ok()).collect();
            match nums.as_deref() {
                Some(&[c, ch, k]) => Ok(LevelSpec::new(c, ch, k)),
                _ => Err(invalid(format!(
                    "level `{item}` (expected convs x channels x kernel)"
                ))),
            }
        })
        .collect()
}

fn parse_usize(k: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| invalid(format!("`{k}` expects an integer, got `{v}`")))
}

fn parse_f64_list(k: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| invalid(format!("`{k}` expects numbers, got `{x}`")))
        })
        .collect()
}

/// Nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct SideOutputs {
    /// `S^{m,n}` logits, indexed `[m][n]`.
    pub side: Vec<Vec<Var>>,
    /// `S^{f,m}` logits, indexed `[m]`.
    pub fused: Vec<Var>,
}

impl SideOutputs {
    pub fn map_count(&self) -> usize {
        self.side.iter().map(Vec::len).sum::<usize>() + self.fused.len()
    }
}

/// Builds a stage input from the image and the activated side outputs of
/// the previous stage (empty for the first stage).
pub fn stage_input(g: &mut Graph, image: Var, prev: &[Var], mode: RecursiveInputs) -> Result<Var> {
    if prev.is_empty() {
        return Ok(image);
    }
    match mode {
        RecursiveInputs::All => {
            let mut parts = Vec::with_capacity(prev.len() + 1);
            parts.push(image);
            parts.extend_from_slice(prev);
            g.concat_channels(&parts)
        }
        RecursiveInputs::Single(l) => {
            if l == 0 || l > prev.len() {
                return Err(invalid(format!(
                    "recursive input level {l} not in 1..={}",
                    prev.len()
                )));
            }
            g.concat_channels(&[image, prev[l - 1]])
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct M2fcn {
    config: NetworkConfig,
    store: ParamStore,
    stages: Vec<SubNet>,
    fusion: Vec<ParamId>,
}

impl M2fcn {
    /// Fresh network. Stage `m` is seeded from `(seed, m)`; fusion weights
    /// start at `1/N`.
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let n = config.levels();
        let mut store = ParamStore::new();
        let mut stages = Vec::with_capacity(config.stages);
        let mut fusion = Vec::with_capacity(config.stages);
        for m in 0..config.stages {
            let sub_cfg = SubNetConfig {
                levels: config.subnet.levels.clone(),
                input_channels: config.stage_input_channels(m),
            };
            let prefix = format!("stage{}.", m + 1);
            let stage_seed = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(m as u64 + 1);
            stages.push(SubNet::build(
                &sub_cfg,
                stage_seed,
                &mut store,
                &prefix,
                config.learn_upsample,
            )?);
            fusion.push(store.add(
                format!("{prefix}fusion"),
                Tensor::full(&[n], 1.0 / n as f64),
                true,
            ));
        }
        Ok(Self {
            config: config.clone(),
            store,
            stages,
            fusion,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn stage(&self, m: usize) -> &SubNet {
        &self.stages[m]
    }

    pub fn fusion_id(&self, m: usize) -> ParamId {
        self.fusion[m]
    }

    /// Runs every stage on `image` inside `g`.
    pub fn forward_all(&self, g: &mut Graph, image: &Tensor) -> Result<SideOutputs> {
        let (c, _, _) = image.dims3()?;
        if c != self.config.image_channels() {
            return Err(shape_err(format!(
                "network expects {} image channels, got {c}",
                self.config.image_channels()
            )));
        }
        let img = g.constant(image.clone());
        let mut prev: Vec<Var> = Vec::new();
        let mut side = Vec::with_capacity(self.stages.len());
        let mut fused = Vec::with_capacity(self.stages.len());
        for (m, stage) in self.stages.iter().enumerate() {
            let input = stage_input(g, img, &prev, self.config.recursive)?;
            let maps = stage.forward(&self.store, g, input)?;
            let h = self.store.bind(g, self.fusion[m]);
            fused.push(g.fuse(&maps, h)?);
            if m + 1 < self.stages.len() {
                prev = match self.config.recursive_activation {
                    RecursiveActivation::Sigmoid => {
                        maps.iter().map(|&s| g.sigmoid(s)).collect::<Result<_>>()?
                    }
                    RecursiveActivation::Logit => maps.clone(),
                };
            }
            side.push(maps);
        }
        Ok(SideOutputs { side, fused })
    }

    /// Boundary probability map `σ(S^{f,M})`; values near 0 mark membrane.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let outs = self.forward_all(&mut g, image)?;
        let last = *outs.fused.last().expect("at least one stage");
        let p = g.sigmoid(last)?;
        Ok(g.value(p).clone())
    }

    /// Copies stage-1 parameters (trunk, heads, fusion) from a trained
    /// network with a compatible first stage.
    pub fn init_stage1_from(&mut self, source: &M2fcn) -> Result<()> {
        let mut copied = 0;
        for (_, e) in source
            .store
            .iter()
            .filter(|(_, e)| e.name.starts_with("stage1."))
        {
            let id = self
                .store
                .find(&e.name)
                .ok_or_else(|| invalid(format!("no parameter `{}` in target network", e.name)))?;
            let target = self.store.entry_mut(id);
            if target.value.shape() != e.value.shape() {
                return Err(shape_err(format!(
                    "`{}`: {:?} vs {:?}",
                    e.name,
                    target.value.shape(),
                    e.value.shape()
                )));
            }
            target.value = e.value.clone();
            copied += 1;
        }
        if copied == 0 {
            return Err(invalid("source network has no stage-1 parameters"));
        }
        Ok(())
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let text = self.config.to_text();
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        w.write_all(&(self.store.len() as u32).to_le_bytes())?;
        for (_, e) in self.store.iter() {
            w.write_all(&(e.name.len() as u32).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&[u8::from(e.trainable)])?;
            w.write_all(&(e.value.shape().len() as u32).to_le_bytes())?;
            for &d in e.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in e.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.save(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = read_u32(&mut r)? as usize;
        let text = read_string(&mut r, len)?;
        let config = NetworkConfig::from_text(&text)?;
        let mut net = M2fcn::new(&config, 0)?;
        let count = read_u32(&mut r)? as usize;
        if count != net.store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {count}",
                net.store.len()
            )));
        }
        for i in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = read_string(&mut r, name_len)?;
            let mut flag = [0u8; 1];
            read_exact(&mut r, &mut flag)?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let entry = net.store.entry_mut(ParamId(i));
            if entry.name != name || entry.value.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {i}: found `{name}` {shape:?}, expected `{}` {:?}",
                    entry.name,
                    entry.value.shape()
                )));
            }
            for v in entry.value.data_mut() {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                *v = f64::from_le_bytes(b);
            }
            if !entry.value.is_finite() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` holds non-finite values"
                )));
            }
            entry.trainable = flag[0] != 0;
        }
        Ok(net)
    }
}

/// File signature: 8 magic bytes followed by a little-endian `u32` version.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"M2FCNCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    if len > 1 << 20 {
        return Err(Error::Checkpoint(format!(
            "implausible string length {len}"
        )));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[1, h, w], |i| 0.5 + 0.4 * (i as f64 * 0.731).sin())
    }

    #[test]
    fn stage_input_modes() {
        let mut g = Graph::new();
        let img = g.constant(image(4, 4));
        let prev: Vec<Var> = (0..5)
            .map(|k| g.constant(Tensor::full(&[1, 4, 4], k as f64)))
            .collect();
        assert_eq!(
            stage_input(&mut g, img, &[], RecursiveInputs::All).unwrap(),
            img
        );
        let all = stage_input(&mut g, img, &prev, RecursiveInputs::All).unwrap();
        assert_eq!(g.value(all).shape(), &[6, 4, 4]);
        let single = stage_input(&mut g, img, &prev, RecursiveInputs::Single(5)).unwrap();
        assert_eq!(g.value(single).shape(), &[2, 4, 4]);
        assert_eq!(g.value(single).channel(1).unwrap().data()[0], 4.0);
        assert!(stage_input(&mut g, img, &prev, RecursiveInputs::Single(6)).is_err());
    }

    #[test]
    fn output_counts() {
        let cfg = NetworkConfig::new(1, SubNetConfig::toy(1));
        let net = M2fcn::new(&cfg, 0).unwrap();
        let mut g = Graph::new();
        let outs = net.forward_all(&mut g, &image(8, 8)).unwrap();
        assert_eq!((outs.side[0].len(), outs.fused.len()), (3, 1));

        let sub = SubNetConfig {
            levels: vec![LevelSpec::new(1, 2, 3); 5],
            input_channels: 1,
        };
        let cfg = NetworkConfig::new(3, sub);
        let net = M2fcn::new(&cfg, 0).unwrap();
        let mut g = Graph::new();
        let outs = net.forward_all(&mut g, &image(16, 16)).unwrap();
        assert_eq!(outs.side.iter().map(Vec::len).sum::<usize>(), 15);
        assert_eq!(outs.fused.len(), 3);
        assert_eq!(outs.map_count(), 18);
        assert_eq!(cfg.stage_input_channels(1), 6);
    }

    #[test]
    fn zero_init_predicts_one_half() {
        let net = M2fcn::new(&NetworkConfig::toy(), 3).unwrap();
        let mut g = Graph::new();
        let outs = net.forward_all(&mut g, &image(12, 12)).unwrap();
        for &f in &outs.fused {
            assert!(g.value(f).data().iter().all(|&v| v == 0.0));
        }
        let p = net.predict(&image(12, 12)).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = NetworkConfig::paper();
        cfg.recursive = RecursiveInputs::Single(4);
        cfg.alpha_fuse = vec![0.5, 1.0, 2.0];
        cfg.beta_mode = BetaMode::Literal;
        let back = NetworkConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert!(NetworkConfig::from_text("stages = 1\nbogus = 2").is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let net = M2fcn::new(&NetworkConfig::toy(), 9).unwrap();
        let bytes = net.to_bytes();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let back = M2fcn::load(bytes.as_slice()).unwrap();
        assert_eq!(back, net);
        assert!(M2fcn::load(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(M2fcn::load(bad.as_slice()).is_err());
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = NetworkConfig::toy();
        cfg.recursive = RecursiveInputs::Single(4);
        assert!(M2fcn::new(&cfg, 0).is_err());
        let mut cfg = NetworkConfig::toy();
        cfg.alpha_fuse[0] = -1.0;
        assert!(M2fcn::new(&cfg, 0).is_err());
        let cfg = NetworkConfig::toy().with_stages(0);
        assert!(M2fcn::new(&cfg, 0).is_err());
    }
}
