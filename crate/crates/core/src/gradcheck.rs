//! Finite-difference verification of [`Graph::backward`].
//!
//! Derivatives are estimated with the fourth-order central stencil
//! `(8(f(+ε) - f(-ε)) - (f(+2ε) - f(-2ε))) / 12ε`, which keeps truncation
//! error negligible at step sizes large enough to swamp round-off.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{synth_generate, SynthParams};
use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, ParamId, Var};
use crate::network::{M2fcn, NetworkConfig};
use crate::objective::{side_loss, total_loss, BoundaryLabels};
use crate::ops::{bilinear_kernel, Conv2dSpec};
use crate::subnet::SubNetConfig;
use crate::tensor::Tensor;

/// Entries whose perturbation moves a relu input or a pooling gap by more
/// than `1/KINK_MARGIN` of its distance to the kink are skipped.
pub const KINK_MARGIN: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat entry)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub skipped: usize,
}

/// Checks a scalar function of `params`, registered as `ParamId(0..n)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let with_ids: Vec<(ParamId, Tensor)> = params
        .iter()
        .enumerate()
        .map(|(i, t)| (ParamId(i), t.clone()))
        .collect();
    grad_check_ids(f, &with_ids, eps)
}

/// Like [`grad_check`] with explicit parameter ids, for functions that bind
/// parameters themselves (the first registration of an id wins).
pub fn grad_check_ids<F>(f: F, params: &[(ParamId, Tensor)], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check(f, params, eps, |_, len| (0..len).collect())
}

/// Like [`grad_check_ids`], but checks at most `per_param` entries of each
/// tensor, drawn without replacement from a seeded shuffle.
pub fn grad_check_sampled<F>(
    f: F,
    params: &[(ParamId, Tensor)],
    eps: f64,
    per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<Vec<usize>> = params
        .iter()
        .map(|(_, t)| {
            let mut idx: Vec<usize> = (0..t.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(per_param);
            idx.sort_unstable();
            idx
        })
        .collect();
    check(f, params, eps, |pi, _| picks[pi].clone())
}

fn check<F, S>(f: F, params: &[(ParamId, Tensor)], eps: f64, select: S) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    S: Fn(usize, usize) -> Vec<usize>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(invalid(format!(
            "grad_check eps must be positive, got {eps}"
        )));
    }
    let eval = |values: &[(ParamId, Tensor)]| -> Result<(Graph, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|(id, t)| g.param(*id, t)).collect();
        let root = f(&mut g, &vars)?;
        let v = g.value(root);
        if !v.is_scalar() {
            return Err(Error::Graph(
                "grad_check function must return a scalar".into(),
            ));
        }
        if !v.data()[0].is_finite() {
            return Err(Error::NonFinite {
                op: "grad_check function",
            });
        }
        Ok((g, root))
    };

    let (base, root) = eval(params)?;
    let grads = base.backward(root)?;
    let base_kinks = base.kink_features(&base);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    let mut work: Vec<(ParamId, Tensor)> = params.to_vec();
    for (pi, (id, value)) in params.iter().enumerate() {
        let analytic = grads.get(*id).expect("parameter registered");
        for j in select(pi, value.len()) {
            let orig = value.data()[j];
            let mut probe = |delta: f64| -> Result<(Graph, Var)> {
                work[pi].1.data_mut()[j] = orig + delta;
                let r = eval(&work);
                work[pi].1.data_mut()[j] = orig;
                r
            };
            let evals = [
                probe(eps)?,
                probe(-eps)?,
                probe(2.0 * eps)?,
                probe(-2.0 * eps)?,
            ];
            let kinks: Vec<Vec<f64>> = evals.iter().map(|(g, _)| g.kink_features(&base)).collect();
            if near_kink(&base_kinks, &kinks) {
                report.skipped += 1;
                continue;
            }
            let f: Vec<f64> = evals.iter().map(|(g, r)| g.value(*r).data()[0]).collect();
            let cd = (8.0 * (f[0] - f[1]) - (f[2] - f[3])) / (12.0 * eps);
            let a = analytic.data()[j];
            let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((pi, j));
            }
        }
    }
    Ok(report)
}

/// Relative error bound used by [`run_suite`].
pub const SUITE_TOLERANCE: f64 = 1e-4;
pub const SUITE_EPS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel_error <= SUITE_TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Reduces `y` to a scalar through a fixed random projection so every
/// output entry receives a distinct upstream gradient.
fn project(g: &mut Graph, y: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let probe = uniform(&mut rng, g.value(y).shape(), 1.0);
    let c = g.constant(probe);
    let m = g.mul(y, c)?;
    g.sum(m)
}

/// Every differentiable op plus a two-stage network with non-zero heads,
/// each checked by central differences.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: &str, report: GradCheckReport| {
        out.push(SuiteEntry {
            name: name.to_string(),
            report,
        })
    };
    let ps = seed.wrapping_add(1);

    let x = uniform(&mut rng, &[2, 5, 6], 1.0);
    let w = uniform(&mut rng, &[3, 2, 3, 3], 0.5);
    let b = uniform(&mut rng, &[3], 0.5);
    for (name, spec) in [
        ("conv2d 3x3 same", Conv2dSpec::same(3)),
        ("conv2d 3x3 stride 2", Conv2dSpec { stride: 2, pad: 1 }),
        ("conv2d 3x3 valid", Conv2dSpec { stride: 1, pad: 0 }),
    ] {
        let r = grad_check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], spec)?;
                project(g, y, ps)
            },
            &[x.clone(), w.clone(), b.clone()],
            SUITE_EPS,
        )?;
        push(name, r);
    }

    let small = uniform(&mut rng, &[2, 3, 4], 1.0);
    for factor in [2usize, 3, 4] {
        let kernel = bilinear_kernel(2, factor)?;
        let jitter = uniform(&mut rng, kernel.shape(), 0.1);
        let kernel = Tensor::new(
            kernel.shape().to_vec(),
            kernel
                .data()
                .iter()
                .zip(jitter.data())
                .map(|(a, b)| a + b)
                .collect(),
        )?;
        let (oh, ow) = (3 * factor - 1, 4 * factor);
        let r = grad_check(
            |g, v| {
                let y = g.upsample(v[0], v[1], factor, oh, ow)?;
                project(g, y, ps)
            },
            &[small.clone(), kernel],
            SUITE_EPS,
        )?;
        push(&format!("upsample x{factor}"), r);
    }

    let odd = uniform(&mut rng, &[2, 5, 7], 1.0);
    let r = grad_check(
        |g, v| {
            let y = g.maxpool2(v[0])?;
            project(g, y, ps)
        },
        std::slice::from_ref(&odd),
        SUITE_EPS,
    )?;
    push("maxpool2", r);

    for (name, act) in [("relu", 0u8), ("sigmoid", 1)] {
        let r = grad_check(
            |g, v| {
                let y = if act == 0 {
                    g.relu(v[0])?
                } else {
                    g.sigmoid(v[0])?
                };
                project(g, y, ps)
            },
            std::slice::from_ref(&odd),
            SUITE_EPS,
        )?;
        push(name, r);
    }

    let a = uniform(&mut rng, &[1, 3, 4], 1.0);
    let c = uniform(&mut rng, &[2, 3, 4], 1.0);
    let r = grad_check(
        |g, v| {
            let y = g.concat_channels(&[v[0], v[1]])?;
            project(g, y, ps)
        },
        &[a.clone(), c],
        SUITE_EPS,
    )?;
    push("concat", r);

    let maps: Vec<Tensor> = (0..3).map(|_| uniform(&mut rng, &[1, 3, 4], 1.0)).collect();
    let h = uniform(&mut rng, &[3], 1.0);
    let mut fuse_params = maps.clone();
    fuse_params.push(h);
    let r = grad_check(
        |g, v| {
            let y = g.fuse(&v[..3], v[3])?;
            project(g, y, ps)
        },
        &fuse_params,
        SUITE_EPS,
    )?;
    push("fuse", r);

    let r = grad_check(
        |g, v| {
            let m = g.mul(v[0], v[1])?;
            let l = g.linear_combination(&[(m, 0.7), (v[0], -1.3)])?;
            project(g, l, ps)
        },
        &[maps[0].clone(), maps[1].clone()],
        SUITE_EPS,
    )?;
    push("mul and linear combination", r);

    let logits = uniform(&mut rng, &[1, 4, 5], 3.0);
    let mask: Vec<bool> = (0..20).map(|_| rng.random_bool(0.3)).collect();
    let labels = BoundaryLabels::new(4, 5, mask)?;
    let r = grad_check(
        |g, v| side_loss(g, v[0], &labels, 0.8),
        &[logits],
        SUITE_EPS,
    )?;
    push("balanced cross-entropy", r);

    push("two-stage network", network_check(seed, 40)?);
    Ok(out)
}

/// The toy two-stage network on an `8×8` synthetic crop, with head and
/// fusion weights randomised so gradients reach every trunk layer.
/// Checks up to `per_param` entries of every parameter tensor.
pub fn network_check(seed: u64, per_param: usize) -> Result<GradCheckReport> {
    let cfg = NetworkConfig::new(2, SubNetConfig::toy(1));
    let mut net = M2fcn::new(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids: Vec<ParamId> = net
        .params()
        .iter()
        .filter(|(_, e)| e.name.contains(".head.") || e.name.ends_with(".fusion"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let e = net.params_mut().entry_mut(id);
        e.value = uniform(&mut rng, e.value.shape(), 0.5);
    }
    let sample = synth_generate(&SynthParams::new(32, 32, 3, 1.0), seed)?;
    let crop =
        |t: &[f64]| -> Vec<f64> { (0..64).map(|i| t[(12 + i / 8) * 32 + 12 + i % 8]).collect() };
    let image = Tensor::new(vec![1, 8, 8], crop(sample.image.data()))?;
    let mask: Vec<bool> = (0..64)
        .map(|i| sample.labels.mask()[(12 + i / 8) * 32 + 12 + i % 8])
        .collect();
    let labels = BoundaryLabels::new(8, 8, mask)?;
    let params: Vec<(ParamId, Tensor)> = net
        .params()
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(id, e)| (id, e.value.clone()))
        .collect();
    grad_check_sampled(
        |g, _| {
            let outs = net.forward_all(g, &image)?;
            Ok(total_loss(g, &outs, &labels, net.config())?.total)
        },
        &params,
        SUITE_EPS,
        per_param,
        seed,
    )
}

fn near_kink(base: &[f64], perturbed: &[Vec<f64>]) -> bool {
    base.iter().enumerate().any(|(k, &b)| {
        let moved = perturbed
            .iter()
            .map(|p| (p[k] - b).abs())
            .fold(0.0, f64::max);
        moved > 0.0 && b.abs() <= KINK_MARGIN * moved
    })
}
