//! Seeded EM-like images: a Voronoi partition with dark membranes of
//! varying thickness, light interiors and dark ellipse blobs that stay
//! clear of the membranes. Every pixel carries the same truncated Gaussian
//! texture, so blob and membrane intensities overlap.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::eval::{label_components, LabelImage};
use crate::objective::neighbours4;
use crate::tensor::Tensor;

use super::Sample;

pub const MEMBRANE_LEVEL: f64 = 0.1;
pub const INTERIOR_LEVEL: f64 = 0.7;
pub const TEXTURE_SIGMA: f64 = 0.08;
pub const DISTRACTOR_LEVEL: f64 = 0.25;
/// Minimum gap in pixels between a blob and the nearest membrane pixel.
pub const DISTRACTOR_CLEARANCE: usize = 2;
const MIN_CELL_AREA: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthParams {
    pub height: usize,
    pub width: usize,
    pub cells: usize,
    /// Expected blobs per cell.
    pub distractor_rate: f64,
}

impl SynthParams {
    pub fn new(height: usize, width: usize, cells: usize, distractor_rate: f64) -> Self {
        Self {
            height,
            width,
            cells,
            distractor_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(invalid(format!(
                "synthetic images must be at least 32×32, got {}×{}",
                self.height, self.width
            )));
        }
        if self.cells < 2 {
            return Err(invalid("at least two cells are required"));
        }
        if self.cells * MIN_CELL_AREA > self.height * self.width {
            return Err(invalid(format!(
                "{} cells do not fit in {}×{} (at most {} pixels per cell)",
                self.cells, self.height, self.width, MIN_CELL_AREA
            )));
        }
        if !self.distractor_rate.is_finite() || self.distractor_rate < 0.0 {
            return Err(invalid("distractor rate must be finite and non-negative"));
        }
        Ok(())
    }
}

fn place_seeds(rng: &mut ChaCha8Rng, p: &SynthParams) -> Vec<(f64, f64)> {
    let (h, w) = (p.height as f64, p.width as f64);
    let mut min_dist = 0.6 * (h * w / p.cells as f64).sqrt();
    loop {
        let mut seeds: Vec<(f64, f64)> = Vec::with_capacity(p.cells);
        let mut attempts = 0;
        while seeds.len() < p.cells && attempts < 200 * p.cells {
            attempts += 1;
            let s = (rng.random_range(0.0..h), rng.random_range(0.0..w));
            let far = seeds
                .iter()
                .all(|q| (s.0 - q.0).hypot(s.1 - q.1) >= min_dist);
            if far {
                seeds.push(s);
            }
        }
        if seeds.len() == p.cells {
            return seeds;
        }
        min_dist *= 0.8;
    }
}

/// Voronoi ids `1..=cells`; ties go to the lower seed index.
fn voronoi(p: &SynthParams, seeds: &[(f64, f64)]) -> Vec<u32> {
    let mut ids = Vec::with_capacity(p.height * p.width);
    for y in 0..p.height {
        for x in 0..p.width {
            let (cy, cx) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut best = (f64::INFINITY, 0);
            for (k, s) in seeds.iter().enumerate() {
                let d = (cy - s.0).powi(2) + (cx - s.1).powi(2);
                if d < best.0 {
                    best = (d, k);
                }
            }
            ids.push(best.1 as u32 + 1);
        }
    }
    ids
}

/// Membrane band of id-0 pixels. Thickness `t` per interface: 1 marks the
/// lower-id side, 2 both sides, 3 both sides plus one more pixel into the
/// lower-id cell.
fn carve_membranes(rng: &mut ChaCha8Rng, p: &SynthParams, ids: &[u32]) -> Vec<bool> {
    let (h, w) = (p.height, p.width);
    // Interfaces each pixel touches, as (lower, higher) pairs.
    let mut touching: Vec<Vec<(u32, u32)>> = vec![Vec::new(); h * w];
    let mut pairs = BTreeMap::new();
    for i in 0..h * w {
        for j in neighbours4(i / w, i % w, h, w) {
            if ids[j] != ids[i] {
                let pair = (ids[i].min(ids[j]), ids[i].max(ids[j]));
                touching[i].push(pair);
                pairs.insert(pair, 0u8);
            }
        }
    }
    for t in pairs.values_mut() {
        *t = rng.random_range(1..=3);
    }
    let mut band = vec![false; h * w];
    for i in 0..h * w {
        for pair in &touching[i] {
            let lower_side = ids[i] == pair.0;
            if lower_side || pairs[pair] >= 2 {
                band[i] = true;
            }
        }
    }
    // Second pixel on the lower side for thickness-3 interfaces.
    let mut extra = Vec::new();
    for i in 0..h * w {
        if band[i] {
            continue;
        }
        let deep = neighbours4(i / w, i % w, h, w).any(|j| {
            ids[j] == ids[i]
                && touching[j]
                    .iter()
                    .any(|pair| pair.0 == ids[i] && pairs[pair] == 3)
        });
        if deep {
            extra.push(i);
        }
    }
    for i in extra {
        band[i] = true;
    }
    band
}

/// Keeps the largest 4-connected piece of each cell; other pieces join
/// the membrane band.
fn drop_fragments(p: &SynthParams, ids: &mut [u32]) {
    let fg: Vec<bool> = ids.iter().map(|&i| i > 0).collect();
    let comps = label_components(p.height, p.width, &fg).expect("mask matches raster");
    let mut sizes: BTreeMap<u32, usize> = BTreeMap::new();
    for &c in comps.ids() {
        *sizes.entry(c).or_insert(0) += 1;
    }
    // Largest component per cell; ties go to the earliest component.
    let mut keep: BTreeMap<u32, (usize, u32)> = BTreeMap::new();
    for (i, &c) in comps.ids().iter().enumerate() {
        if c == 0 {
            continue;
        }
        let size = sizes[&c];
        let e = keep.entry(ids[i]).or_insert((size, c));
        if size > e.0 {
            *e = (size, c);
        }
    }
    for (i, &c) in comps.ids().iter().enumerate() {
        if c != 0 && keep[&ids[i]].1 != c {
            ids[i] = 0;
        }
    }
}

/// 4-connected BFS distance to the nearest id-0 pixel.
fn membrane_distance(p: &SynthParams, ids: &[u32]) -> Vec<usize> {
    let (h, w) = (p.height, p.width);
    let mut dist = vec![usize::MAX; h * w];
    let mut queue = VecDeque::new();
    for (i, &id) in ids.iter().enumerate() {
        if id == 0 {
            dist[i] = 0;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        for j in neighbours4(i / w, i % w, h, w) {
            if dist[j] == usize::MAX {
                dist[j] = dist[i] + 1;
                queue.push_back(j);
            }
        }
    }
    dist
}

/// One synthetic sample. Equal seeds give bitwise-equal samples.
pub fn synth_generate(p: &SynthParams, seed: u64) -> Result<Sample> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (p.height, p.width);
    let seeds = place_seeds(&mut rng, p);
    let mut ids = voronoi(p, &seeds);
    let band = carve_membranes(&mut rng, p, &ids);
    for (id, &b) in ids.iter_mut().zip(&band) {
        if b {
            *id = 0;
        }
    }
    drop_fragments(p, &mut ids);

    let noise = Normal::new(0.0, TEXTURE_SIGMA).expect("valid sigma");
    // Texture is truncated at three standard deviations.
    let texture = |rng: &mut ChaCha8Rng| -> f64 {
        let n: f64 = noise.sample(rng);
        n.clamp(-3.0 * TEXTURE_SIGMA, 3.0 * TEXTURE_SIGMA)
    };
    let mut image: Vec<f64> = ids
        .iter()
        .map(|&id| {
            let level = if id == 0 {
                MEMBRANE_LEVEL
            } else {
                INTERIOR_LEVEL
            };
            level + texture(&mut rng)
        })
        .collect();

    let dist = membrane_distance(p, &ids);
    let whole = p.distractor_rate.floor() as usize;
    let frac = p.distractor_rate - p.distractor_rate.floor();
    for cell in 1..=p.cells as u32 {
        let inner: Vec<usize> = (0..h * w)
            .filter(|&i| ids[i] == cell && dist[i] > DISTRACTOR_CLEARANCE)
            .collect();
        let mut count = whole;
        if frac > 0.0 && rng.random_bool(frac) {
            count += 1;
        }
        for _ in 0..count {
            if inner.is_empty() {
                break;
            }
            let c = inner[rng.random_range(0..inner.len())];
            let (cy, cx) = ((c / w) as f64, (c % w) as f64);
            let a: f64 = rng.random_range(1.5..4.0);
            let b: f64 = rng.random_range(1.0..2.5);
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let (sin, cos) = theta.sin_cos();
            for &i in &inner {
                let (dy, dx) = ((i / w) as f64 - cy, (i % w) as f64 - cx);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                    image[i] = DISTRACTOR_LEVEL + texture(&mut rng);
                }
            }
        }
    }
    for v in &mut image {
        *v = v.clamp(0.0, 1.0);
    }

    let image = Tensor::new(vec![1, h, w], image).expect("extent is positive");
    let seg = LabelImage::new(h, w, ids)?.canonicalize();
    Sample::from_segments(image, seg)
}

/// `count` samples with per-image seeds derived from `seed`.
pub fn synth_dataset(p: &SynthParams, seed: u64, count: usize) -> Result<Vec<Sample>> {
    (0..count)
        .map(|k| synth_generate(p, seed.wrapping_mul(1_000_003).wrapping_add(k as u64)))
        .collect()
}
