//! Class-balanced cross-entropy over every side output and fused output.
//!
//! Boundary pixels are driven towards `σ(s) → 0` and non-boundary pixels
//! towards `σ(s) → 1`:
//!
//! `ℓ = β·Σ_{j∈B} softplus(s_j) + (1-β)·Σ_{j∉B} softplus(-s_j)`
//!
//! which equals `-β·Σ log(1-σ(s)) - (1-β)·Σ log σ(s)`. Losses are summed
//! over pixels.

use std::sync::Arc;

use crate::error::{invalid, shape_err, Error, Result};
use crate::eval::LabelImage;
use crate::graph::{Graph, Op, Var};
use crate::network::{NetworkConfig, SideOutputs};
use crate::ops::softplus;
use crate::tensor::Tensor;

/// Binary boundary mask, `true` for membrane pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundaryLabels {
    height: usize,
    width: usize,
    mask: Arc<[bool]>,
    boundary: usize,
}

impl BoundaryLabels {
    pub fn new(height: usize, width: usize, mask: Vec<bool>) -> Result<Self> {
        if height * width == 0 {
            return Err(invalid("boundary labels must not be empty"));
        }
        if mask.len() != height * width {
            return Err(shape_err(format!(
                "mask has {} entries for a {height}×{width} raster",
                mask.len()
            )));
        }
        let boundary = mask.iter().filter(|&&b| b).count();
        Ok(Self {
            height,
            width,
            mask: mask.into(),
            boundary,
        })
    }

    /// Pixels labelled 0, or with a 4-neighbour carrying a different
    /// positive id, are boundary. Both sides of an interface between two
    /// positive segments are therefore marked.
    pub fn from_segments(seg: &LabelImage) -> Self {
        let (h, w) = (seg.height(), seg.width());
        let ids = seg.ids();
        let mut mask = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let id = ids[i];
                mask[i] = id == 0 || neighbours4(y, x, h, w).any(|j| ids[j] != 0 && ids[j] != id);
            }
        }
        Self::new(h, w, mask).expect("segment raster is non-empty")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn boundary_count(&self) -> usize {
        self.boundary
    }

    pub fn non_boundary_count(&self) -> usize {
        self.mask.len() - self.boundary
    }

    /// The ideal probability map: 0 on boundary pixels, 1 elsewhere.
    pub fn ideal_map(&self) -> Tensor {
        let data = self
            .mask
            .iter()
            .map(|&b| if b { 0.0 } else { 1.0 })
            .collect();
        Tensor::new(vec![1, self.height, self.width], data).expect("mask is non-empty")
    }
}

pub(crate) fn neighbours4(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let up = (y > 0).then(|| (y - 1) * w + x);
    let left = (x > 0).then(|| y * w + x - 1);
    let right = (x + 1 < w).then(|| y * w + x + 1);
    let down = (y + 1 < h).then(|| (y + 1) * w + x);
    [up, left, right, down].into_iter().flatten()
}

/// How the class-balancing weight is derived from the label counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BetaMode {
    /// `β = |B̄| / (|B| + |B̄|)`.
    #[default]
    Balanced,
    /// `β = |B̄| / |B|`, taken literally (may exceed 1).
    Literal,
}

pub fn class_balance_beta(labels: &BoundaryLabels, mode: BetaMode) -> Result<f64> {
    let b = labels.boundary_count() as f64;
    let nb = labels.non_boundary_count() as f64;
    if b + nb == 0.0 {
        return Err(invalid("empty label raster"));
    }
    Ok(match mode {
        _ if b == 0.0 => 0.0,
        _ if nb == 0.0 => 1.0,
        BetaMode::Balanced => nb / (b + nb),
        BetaMode::Literal => nb / b,
    })
}

fn check_logits(logits: &Tensor, labels: &BoundaryLabels) -> Result<()> {
    if logits.shape() != [1, labels.height, labels.width] {
        return Err(shape_err(format!(
            "logits {:?} do not match {}×{} labels",
            logits.shape(),
            labels.height,
            labels.width
        )));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite {
            op: "side_loss input",
        });
    }
    Ok(())
}

/// Loss value for one logit map, outside any graph.
pub fn side_loss_value(logits: &Tensor, labels: &BoundaryLabels, beta: f64) -> Result<f64> {
    check_logits(logits, labels)?;
    let (mut pos, mut neg) = (0.0, 0.0);
    for (&s, &b) in logits.data().iter().zip(labels.mask.iter()) {
        if b {
            pos += softplus(s);
        } else {
            neg += softplus(-s);
        }
    }
    Ok(beta * pos + (1.0 - beta) * neg)
}

/// Records the class-balanced loss of `logits` as a scalar node.
pub fn side_loss(g: &mut Graph, logits: Var, labels: &BoundaryLabels, beta: f64) -> Result<Var> {
    let value = side_loss_value(g.value(logits), labels, beta)?;
    g.push(
        Tensor::scalar(value),
        Op::BalancedBce {
            logits,
            boundary: labels.mask.clone(),
            beta,
        },
        "side_loss",
    )
}

/// `Σₙ hₙ·Sⁿ` as a differentiable fusion node.
pub fn fuse(g: &mut Graph, side_logits: &[Var], weights: Var) -> Result<Var> {
    g.fuse(side_logits, weights)
}

/// Scalar nodes of one loss evaluation.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    /// `ℓ^{m,n}`, indexed `[m][n]`.
    pub side: Vec<Vec<Var>>,
    /// `ℓ^{f,m}`, indexed `[m]`.
    pub fused: Vec<Var>,
    pub beta: f64,
}

/// `Σ α_{m,n}·ℓ^{m,n} + Σ α_{f,m}·ℓ^{f,m}` with one β per image.
pub fn total_loss(
    g: &mut Graph,
    outs: &SideOutputs,
    labels: &BoundaryLabels,
    cfg: &NetworkConfig,
) -> Result<LossTerms> {
    let stages = cfg.stages;
    if outs.side.len() != stages || outs.fused.len() != stages {
        return Err(invalid(format!(
            "expected outputs for {stages} stages, got {} side / {} fused",
            outs.side.len(),
            outs.fused.len()
        )));
    }
    let beta = class_balance_beta(labels, cfg.beta_mode)?;
    let mut terms = Vec::new();
    let mut side = Vec::with_capacity(stages);
    for (m, maps) in outs.side.iter().enumerate() {
        let mut row = Vec::with_capacity(maps.len());
        for (n, &s) in maps.iter().enumerate() {
            let l = side_loss(g, s, labels, beta)?;
            terms.push((l, cfg.alpha_side[m][n]));
            row.push(l);
        }
        side.push(row);
    }
    let mut fused = Vec::with_capacity(stages);
    for (m, &f) in outs.fused.iter().enumerate() {
        let l = side_loss(g, f, labels, beta)?;
        terms.push((l, cfg.alpha_fuse[m]));
        fused.push(l);
    }
    let total = g.linear_combination(&terms)?;
    Ok(LossTerms {
        total,
        side,
        fused,
        beta,
    })
}
