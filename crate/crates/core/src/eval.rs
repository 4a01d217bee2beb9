//! Segmentation from boundary maps and Rand-based scoring.
//!
//! A boundary map holds values near 0 on membrane and near 1 inside cells.
//! Thresholding keeps the cell interiors, 4-connected components become
//! segments, and sub-threshold pixels are absorbed by flooding in order of
//! decreasing probability. Scores pool pixel-pair counts over all images.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use crate::error::{invalid, shape_err, Error, Result};
use crate::objective::neighbours4;
use crate::tensor::Tensor;

/// Integer segment ids on an `H×W` raster; 0 marks boundary or ignored
/// pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelImage {
    height: usize,
    width: usize,
    ids: Vec<u32>,
}

impl LabelImage {
    pub fn new(height: usize, width: usize, ids: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("label image must be non-empty"));
        }
        if ids.len() != height * width {
            return Err(shape_err(format!(
                "{} ids for a {height}×{width} label image",
                ids.len()
            )));
        }
        Ok(Self { height, width, ids })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// Number of distinct positive ids.
    pub fn segment_count(&self) -> usize {
        let mut seen: Vec<u32> = self.ids.iter().copied().filter(|&i| i > 0).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }

    /// Renumbers positive ids to `1..=K` in row-major order of first
    /// appearance. Id 0 is kept.
    pub fn canonicalize(&self) -> Self {
        let mut map = BTreeMap::new();
        let ids = self
            .ids
            .iter()
            .map(|&id| {
                if id == 0 {
                    0
                } else {
                    let next = map.len() as u32 + 1;
                    *map.entry(id).or_insert(next)
                }
            })
            .collect();
        Self {
            height: self.height,
            width: self.width,
            ids,
        }
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// 4-connected components of `mask`, numbered `1..=K` in row-major order
/// of first pixel; unset pixels get 0.
pub fn label_components(height: usize, width: usize, mask: &[bool]) -> Result<LabelImage> {
    if mask.len() != height * width {
        return Err(shape_err(format!(
            "mask of {} pixels for {height}×{width}",
            mask.len()
        )));
    }
    let mut uf = UnionFind::new(mask.len());
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !mask[i] {
                continue;
            }
            if x + 1 < width && mask[i + 1] {
                uf.union(i, i + 1);
            }
            if y + 1 < height && mask[i + width] {
                uf.union(i, i + width);
            }
        }
    }
    let mut root_id: BTreeMap<usize, u32> = BTreeMap::new();
    let ids = (0..mask.len())
        .map(|i| {
            if !mask[i] {
                return 0;
            }
            let r = uf.find(i);
            let next = root_id.len() as u32 + 1;
            *root_id.entry(r).or_insert(next)
        })
        .collect();
    LabelImage::new(height, width, ids)
}

#[derive(PartialEq)]
struct FloodItem {
    prob: f64,
    index: usize,
    seq: u64,
    label: u32,
}

impl Eq for FloodItem {}

impl Ord for FloodItem {
    // Max-heap: higher probability first, then lower index, then the
    // segment that reached the pixel first.
    fn cmp(&self, other: &Self) -> Ordering {
        self.prob
            .total_cmp(&other.prob)
            .then_with(|| other.index.cmp(&self.index))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for FloodItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Segments a `1×H×W` boundary probability map.
pub fn segment_from_boundary(prob: &Tensor, threshold: f64) -> Result<LabelImage> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(invalid(format!("threshold {threshold} outside [0, 1]")));
    }
    let (c, h, w) = prob.dims3()?;
    if c != 1 {
        return Err(shape_err(format!(
            "boundary map must have 1 channel, got {c}"
        )));
    }
    let p = prob.data();
    let fg: Vec<bool> = p.iter().map(|&v| v >= threshold).collect();
    let mut seg = label_components(h, w, &fg)?;
    let ids = &mut seg.ids;

    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    for i in 0..ids.len() {
        if ids[i] == 0 {
            continue;
        }
        for j in neighbours4(i / w, i % w, h, w) {
            if ids[j] == 0 {
                heap.push(FloodItem {
                    prob: p[j],
                    index: j,
                    seq,
                    label: ids[i],
                });
                seq += 1;
            }
        }
    }
    while let Some(item) = heap.pop() {
        if ids[item.index] != 0 {
            continue;
        }
        ids[item.index] = item.label;
        let i = item.index;
        for j in neighbours4(i / w, i % w, h, w) {
            if ids[j] == 0 {
                heap.push(FloodItem {
                    prob: p[j],
                    index: j,
                    seq,
                    label: item.label,
                });
                seq += 1;
            }
        }
    }
    Ok(seg)
}

/// Overlap counts `n_ij` between proposal segment `i` and ground-truth
/// segment `j`. Keys carry the image index in the high 32 bits so tables
/// from different images can be pooled.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ContingencyTable {
    counts: BTreeMap<(u64, u64), u64>,
}

impl ContingencyTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds the pixels of one image pair. Pixels with id 0 on either side
    /// are skipped.
    pub fn accumulate(&mut self, image: u32, proposal: &LabelImage, gt: &LabelImage) -> Result<()> {
        if (proposal.height, proposal.width) != (gt.height, gt.width) {
            return Err(shape_err(format!(
                "proposal is {}×{}, ground truth is {}×{}",
                proposal.height, proposal.width, gt.height, gt.width
            )));
        }
        let tag = u64::from(image) << 32;
        for (&i, &j) in proposal.ids.iter().zip(&gt.ids) {
            if i > 0 && j > 0 {
                *self
                    .counts
                    .entry((tag | u64::from(i), tag | u64::from(j)))
                    .or_insert(0) += 1;
            }
        }
        Ok(())
    }

    /// Adds every count of `other`.
    pub fn merge(&mut self, other: &ContingencyTable) {
        for (&k, &v) in &other.counts {
            *self.counts.entry(k).or_insert(0) += v;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Non-zero entries as `((proposal, gt), count)`.
    pub fn entries(&self) -> impl Iterator<Item = ((u64, u64), u64)> + '_ {
        self.counts.iter().map(|(&k, &v)| (k, v))
    }

    pub fn get(&self, proposal: u64, gt: u64) -> u64 {
        self.counts.get(&(proposal, gt)).copied().unwrap_or(0)
    }
}

/// Single-image contingency table.
pub fn contingency(proposal: &LabelImage, gt: &LabelImage) -> Result<ContingencyTable> {
    let mut t = ContingencyTable::new();
    t.accumulate(0, proposal, gt)?;
    if t.is_empty() {
        return Err(invalid("every pixel has id 0 in proposal or ground truth"));
    }
    Ok(t)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RandScores {
    pub merge: f64,
    pub split: f64,
    pub fscore: f64,
}

impl RandScores {
    pub fn from_merge_split(merge: f64, split: f64) -> Self {
        let fscore = if merge + split > 0.0 {
            2.0 * merge * split / (merge + split)
        } else {
            0.0
        };
        Self {
            merge,
            split,
            fscore,
        }
    }

    pub fn zero() -> Self {
        Self {
            merge: 0.0,
            split: 0.0,
            fscore: 0.0,
        }
    }
}

/// Rand merge and split scores of a contingency table.
pub fn rand_scores(table: &ContingencyTable) -> Result<RandScores> {
    if table.total() == 0 {
        return Err(invalid("contingency table has zero total"));
    }
    let mut rows: BTreeMap<u64, u128> = BTreeMap::new();
    let mut cols: BTreeMap<u64, u128> = BTreeMap::new();
    let mut sq: u128 = 0;
    for ((i, j), n) in table.entries() {
        let n = u128::from(n);
        sq += n * n;
        *rows.entry(i).or_insert(0) += n;
        *cols.entry(j).or_insert(0) += n;
    }
    let row_sq: u128 = rows.values().map(|r| r * r).sum();
    let col_sq: u128 = cols.values().map(|c| c * c).sum();
    Ok(RandScores::from_merge_split(
        sq as f64 / row_sq as f64,
        sq as f64 / col_sq as f64,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub scores: RandScores,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub best: RandScores,
    pub best_threshold: f64,
    /// One point per threshold, in the order given.
    pub curve: Vec<PrPoint>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,rand_split,rand_merge,fscore\n");
        for p in &self.curve {
            s.push_str(&format!(
                "{},{},{},{}\n",
                p.threshold, p.scores.split, p.scores.merge, p.scores.fscore
            ));
        }
        s
    }
}

/// `count` evenly spaced thresholds from `lo` to `hi` inclusive.
pub fn linspace_thresholds(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count)
            .map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64)
            .collect(),
    }
}

pub fn default_thresholds() -> Vec<f64> {
    linspace_thresholds(0.02, 0.98, 33)
}

/// Pooled scores at one threshold. A threshold that leaves no countable
/// pixel scores zero.
pub fn score_at_threshold(
    probs: &[Tensor],
    gts: &[LabelImage],
    threshold: f64,
) -> Result<RandScores> {
    let mut table = ContingencyTable::new();
    for (k, (p, gt)) in probs.iter().zip(gts).enumerate() {
        let seg = segment_from_boundary(p, threshold)?;
        table.accumulate(k as u32, &seg, gt)?;
    }
    if table.is_empty() {
        return Ok(RandScores::zero());
    }
    rand_scores(&table)
}

/// Scores every threshold and returns the one with the highest F-score
/// (earliest on ties). `threads > 1` splits thresholds across scoped
/// threads.
pub fn best_fscore_sweep(
    probs: &[Tensor],
    gts: &[LabelImage],
    thresholds: &[f64],
    threads: usize,
) -> Result<SweepResult> {
    if probs.len() != gts.len() {
        return Err(invalid(format!(
            "{} probability maps but {} ground-truth maps",
            probs.len(),
            gts.len()
        )));
    }
    if probs.is_empty() || thresholds.is_empty() {
        return Err(invalid("sweep needs at least one map and one threshold"));
    }
    let threads = threads.clamp(1, thresholds.len());
    let scores: Vec<RandScores> = if threads == 1 {
        thresholds
            .iter()
            .map(|&t| score_at_threshold(probs, gts, t))
            .collect::<Result<_>>()?
    } else {
        let chunk = thresholds.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = thresholds
                .chunks(chunk)
                .map(|ts| {
                    s.spawn(move || {
                        ts.iter()
                            .map(|&t| score_at_threshold(probs, gts, t))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut all = Vec::with_capacity(thresholds.len());
            for h in handles {
                all.extend(
                    h.join()
                        .map_err(|_| Error::Graph("sweep worker panicked".into()))??,
                );
            }
            Ok::<_, Error>(all)
        })?
    };
    let curve: Vec<PrPoint> = thresholds
        .iter()
        .zip(&scores)
        .map(|(&threshold, &scores)| PrPoint { threshold, scores })
        .collect();
    let mut best = 0;
    for (k, p) in curve.iter().enumerate() {
        if p.scores.fscore > curve[best].scores.fscore {
            best = k;
        }
    }
    Ok(SweepResult {
        best: curve[best].scores,
        best_threshold: curve[best].threshold,
        curve,
    })
}
