//! One stage of the network: a ladder of conv/ReLU levels separated by 2×2
//! pooling, with a side-output head on the last convolution of every level.
//!
//! Level `n` (1-based) runs at stride `2^(n-1)`. Its head is a 1×1
//! convolution to one channel followed by upsampling by the same factor, so
//! every side output has the input's spatial size.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, ParamId, Var};
use crate::ops::upsample::bilinear_kernel;
use crate::ops::Conv2dSpec;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelSpec {
    pub convs: usize,
    pub channels: usize,
    pub kernel: usize,
}

impl LevelSpec {
    pub fn new(convs: usize, channels: usize, kernel: usize) -> Self {
        Self {
            convs,
            channels,
            kernel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubNetConfig {
    pub levels: Vec<LevelSpec>,
    pub input_channels: usize,
}

impl SubNetConfig {
    /// Desk-scale ladder: three levels of two 3×3 convolutions, widths 8/16/16.
    pub fn toy(input_channels: usize) -> Self {
        Self {
            levels: vec![
                LevelSpec::new(2, 8, 3),
                LevelSpec::new(2, 16, 3),
                LevelSpec::new(2, 16, 3),
            ],
            input_channels,
        }
    }

    /// VGG-16 shaped ladder: conv counts 2/2/3/3/3, widths 64/128/256/512/512.
    pub fn paper(input_channels: usize) -> Self {
        let convs = [2, 2, 3, 3, 3];
        let widths = [64, 128, 256, 512, 512];
        Self {
            levels: convs
                .iter()
                .zip(widths)
                .map(|(&c, w)| LevelSpec::new(c, w, 3))
                .collect(),
            input_channels,
        }
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(invalid("sub-net needs at least one level"));
        }
        if self.input_channels == 0 {
            return Err(invalid("sub-net input channels must be positive"));
        }
        for (n, l) in self.levels.iter().enumerate() {
            if l.convs == 0 || l.channels == 0 {
                return Err(invalid(format!(
                    "level {} has no convolutions or channels",
                    n + 1
                )));
            }
            if l.kernel % 2 == 0 {
                return Err(invalid(format!(
                    "level {} kernel {} must be odd",
                    n + 1,
                    l.kernel
                )));
            }
        }
        Ok(())
    }

    /// Upsampling factor (equal to the stride) of 1-based `level`.
    pub fn stride(&self, level: usize) -> usize {
        1 << (level - 1)
    }
}

/// `(stride, receptive field)` of the last convolution of 1-based `level`,
/// composing `rf += (k-1)·jump; jump *= stride` over every conv and pool.
pub fn receptive_field(config: &SubNetConfig, level: usize) -> Result<(usize, usize)> {
    if level == 0 || level > config.levels.len() {
        return Err(invalid(format!(
            "level {level} out of range 1..={}",
            config.levels.len()
        )));
    }
    let (mut rf, mut jump) = (1usize, 1usize);
    for (n, spec) in config.levels[..level].iter().enumerate() {
        if n > 0 {
            rf += jump;
            jump *= 2;
        }
        for _ in 0..spec.convs {
            rf += (spec.kernel - 1) * jump;
        }
    }
    Ok((jump, rf))
}

#[derive(Clone, Debug, PartialEq)]
struct ConvIds {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct LevelIds {
    convs: Vec<ConvIds>,
    head: ConvIds,
    /// Absent for level 1, whose factor-1 upsampling is the identity.
    upsample: Option<ParamId>,
}

/// Parameter handles for one stage; the tensors live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct SubNet {
    config: SubNetConfig,
    levels: Vec<LevelIds>,
}

impl SubNet {
    /// Adds a freshly initialised stage to `store` under `prefix`.
    ///
    /// Trunk weights are drawn from `Normal(0, sqrt(2/fan_in))`, biases and
    /// head weights start at zero, and upsampling kernels are bilinear
    /// (trainable only when `learn_upsample`).
    pub fn build(
        config: &SubNetConfig,
        seed: u64,
        store: &mut ParamStore,
        prefix: &str,
        learn_upsample: bool,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_ch = config.input_channels;
        let mut levels = Vec::with_capacity(config.levels.len());
        for (n, spec) in config.levels.iter().enumerate() {
            let level = n + 1;
            let mut convs = Vec::with_capacity(spec.convs);
            for c in 0..spec.convs {
                let k = spec.kernel;
                let fan_in = (in_ch * k * k) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                let w = Tensor::from_fn(&[spec.channels, in_ch, k, k], |_| normal.sample(&mut rng));
                let name = format!("{prefix}level{level}.conv{}", c + 1);
                convs.push(ConvIds {
                    weight: store.add(format!("{name}.weight"), w, true),
                    bias: store.add(
                        format!("{name}.bias"),
                        Tensor::zeros(&[spec.channels]),
                        true,
                    ),
                });
                in_ch = spec.channels;
            }
            let head = ConvIds {
                weight: store.add(
                    format!("{prefix}level{level}.head.weight"),
                    Tensor::zeros(&[1, in_ch, 1, 1]),
                    true,
                ),
                bias: store.add(
                    format!("{prefix}level{level}.head.bias"),
                    Tensor::zeros(&[1]),
                    true,
                ),
            };
            let factor = config.stride(level);
            let upsample = (factor > 1).then(|| {
                store.add(
                    format!("{prefix}level{level}.upsample"),
                    bilinear_kernel(1, factor).expect("factor ≥ 1"),
                    learn_upsample,
                )
            });
            levels.push(LevelIds {
                convs,
                head,
                upsample,
            });
        }
        Ok(Self {
            config: config.clone(),
            levels,
        })
    }

    pub fn config(&self) -> &SubNetConfig {
        &self.config
    }

    /// Side-output logit maps, one `1×H×W` map per level.
    pub fn forward(&self, store: &ParamStore, g: &mut Graph, input: Var) -> Result<Vec<Var>> {
        let (c, h, w) = g.value(input).dims3()?;
        if c != self.config.input_channels {
            return Err(shape_err(format!(
                "sub-net expects {} input channels, got {c}",
                self.config.input_channels
            )));
        }
        let mut x = input;
        let mut sides = Vec::with_capacity(self.levels.len());
        for (n, (spec, ids)) in self.config.levels.iter().zip(&self.levels).enumerate() {
            if n > 0 {
                x = g.maxpool2(x)?;
            }
            for conv in &ids.convs {
                let wv = store.bind(g, conv.weight);
                let bv = store.bind(g, conv.bias);
                x = g.conv2d(x, wv, bv, Conv2dSpec::same(spec.kernel))?;
                x = g.relu(x)?;
            }
            let hw = store.bind(g, ids.head.weight);
            let hb = store.bind(g, ids.head.bias);
            let head = g.conv2d(x, hw, hb, Conv2dSpec::same(1))?;
            let side = match ids.upsample {
                Some(k) => {
                    let kv = store.bind(g, k);
                    g.upsample(head, kv, self.config.stride(n + 1), h, w)?
                }
                None => head,
            };
            sides.push(side);
        }
        Ok(sides)
    }
}

/// Standalone stage with its own parameter store.
pub fn build_subnet(config: &SubNetConfig, seed: u64) -> Result<(SubNet, ParamStore)> {
    let mut store = ParamStore::new();
    let net = SubNet::build(config, seed, &mut store, "", false)?;
    Ok((net, store))
}
