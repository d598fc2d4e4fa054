//! Coarse stage: pick candidate blocks whose DDE stands out from the local
//! baseline.
//!
//! Blocks are grouped into constant-tint regions (per grid pass), laid out
//! row-major as a 1-D sequence, and detrended with a running median. What
//! remains above the threshold is the region of interest for the fine
//! stage.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::blockgrid::{BlockId, BlockMetrics, GridPass};

/// Calibrated as the 95th percentile of baseline-corrected DDE over the
/// defect-free calibration pages (see `calibration_pages`).
pub const DEFAULT_DDE_THRESHOLD: f64 = 0.6044;
pub const DEFAULT_BASELINE_WINDOW: usize = 31;
/// Neighbouring blocks whose mean colors differ by less than this ΔE belong
/// to the same tint region.
pub const DEFAULT_REGION_DELTA_E: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CandidateConfig {
    pub threshold: f64,
    pub baseline_window: usize,
    pub region_delta_e: f64,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_DDE_THRESHOLD,
            baseline_window: DEFAULT_BASELINE_WINDOW,
            region_delta_e: DEFAULT_REGION_DELTA_E,
        }
    }
}

/// One block's DDE before and after baseline removal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselinePoint {
    pub id: BlockId,
    /// Tint region index, unique within the page.
    pub region: usize,
    pub raw: f64,
    pub baseline: f64,
    pub corrected: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidateSet {
    pub block_ids: BTreeSet<BlockId>,
    pub threshold_used: f64,
    pub baseline: BTreeMap<BlockId, f64>,
}

impl CandidateSet {
    pub fn contains(&self, id: &BlockId) -> bool {
        self.block_ids.contains(id)
    }

    pub fn len(&self) -> usize {
        self.block_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.block_ids.is_empty()
    }
}

fn median_of(buf: &mut [f64]) -> f64 {
    buf.sort_by(f64::total_cmp);
    let n = buf.len();
    if n % 2 == 1 {
        buf[n / 2]
    } else {
        0.5 * (buf[n / 2 - 1] + buf[n / 2])
    }
}

/// Median over a centered window of `window` samples, clipped at the ends
/// of the sequence.
pub fn running_median(values: &[f64], window: usize) -> Vec<f64> {
    let half = window.max(1) / 2;
    let mut buf = Vec::with_capacity(window.max(1));
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            buf.clear();
            buf.extend_from_slice(&values[lo..hi]);
            median_of(&mut buf)
        })
        .collect()
}

struct DisjointSet(Vec<usize>);

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

fn color_distance(a: &BlockMetrics, b: &BlockMetrics) -> f64 {
    let d = [a.mean_l - b.mean_l, a.mean_a - b.mean_a, a.mean_b - b.mean_b];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Assigns each block a tint region: 4-connected grid neighbours of the
/// same pass with similar mean color. Returns one region index per input
/// block; indices are dense and ordered by first appearance.
pub fn tint_regions(metrics: &[BlockMetrics], region_delta_e: f64) -> Vec<usize> {
    let index: BTreeMap<BlockId, usize> = metrics.iter().enumerate().map(|(i, m)| (m.id, i)).collect();
    let mut sets = DisjointSet::new(metrics.len());
    for (i, m) in metrics.iter().enumerate() {
        for (dr, dc) in [(0u32, 1u32), (1, 0)] {
            let nb = BlockId::new(m.id.pass, m.id.row + dr, m.id.col + dc);
            if let Some(&j) = index.get(&nb) {
                if color_distance(m, &metrics[j]) < region_delta_e {
                    sets.union(i, j);
                }
            }
        }
    }
    let mut dense = BTreeMap::new();
    (0..metrics.len())
        .map(|i| {
            let root = sets.find(i);
            let next = dense.len();
            *dense.entry(root).or_insert(next)
        })
        .collect()
}

/// Subtracts a running-median baseline from each block's DDE, separately
/// for every (grid pass, tint region) sequence in row-major order.
/// Corrected values are clamped at zero.
pub fn remove_baseline(metrics: &[BlockMetrics], config: &CandidateConfig) -> Vec<BaselinePoint> {
    let regions = tint_regions(metrics, config.region_delta_e);
    let mut groups: BTreeMap<(GridPass, usize), Vec<usize>> = BTreeMap::new();
    for (i, m) in metrics.iter().enumerate() {
        groups.entry((m.id.pass, regions[i])).or_default().push(i);
    }

    let mut points: Vec<BaselinePoint> = Vec::with_capacity(metrics.len());
    for members in groups.values_mut() {
        members.sort_by_key(|&i| metrics[i].id);
        let raw: Vec<f64> = members.iter().map(|&i| metrics[i].dde).collect();
        let baseline = running_median(&raw, config.baseline_window);
        for (k, &i) in members.iter().enumerate() {
            points.push(BaselinePoint {
                id: metrics[i].id,
                region: regions[i],
                raw: raw[k],
                baseline: baseline[k],
                corrected: (raw[k] - baseline[k]).max(0.0),
            });
        }
    }
    points.sort_by_key(|p| p.id);
    points
}

/// Keeps blocks whose corrected DDE is positive and at least `threshold`.
pub fn select_candidates(points: &[BaselinePoint], threshold: f64) -> CandidateSet {
    let threshold = threshold.max(0.0);
    CandidateSet {
        block_ids: points
            .iter()
            .filter(|p| p.corrected > 0.0 && p.corrected >= threshold)
            .map(|p| p.id)
            .collect(),
        threshold_used: threshold,
        baseline: points.iter().map(|p| (p.id, p.baseline)).collect(),
    }
}

/// Linear-interpolation percentile, `q` in [0, 100].
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q.clamp(0.0, 100.0) / 100.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// 95th percentile of corrected DDE pooled over defect-free pages.
pub fn calibrate_threshold<'a>(pages: impl IntoIterator<Item = &'a [BaselinePoint]>) -> Option<f64> {
    let pooled: Vec<f64> = pages
        .into_iter()
        .flat_map(|p| p.iter().map(|b| b.corrected))
        .collect();
    percentile(&pooled, 95.0)
}
