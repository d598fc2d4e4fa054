//! Fine stage: segment the defect inside a candidate block and measure it.
//!
//! Thresholds come from Otsu's criterion or its valley-emphasis variant,
//! both maximizing `ω₁μ₁² + ω₂μ₂²` over the split level `t`; the variant
//! weights the objective by `1 − p(t)` so splits fall in sparsely
//! populated histogram valleys. Class 1 holds levels `< t`, class 2 levels
//! `≥ t`, and ties go to the smallest `t`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blockgrid::{BlockId, BlockPixels};
use crate::geom::BBox;

pub const DEFAULT_BINS: usize = 256;
pub const DEFAULT_MIN_DEFECT_PX: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum SegmentError {
    #[error("histogram has fewer than two populated levels")]
    DegenerateHistogram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum AttributeError {
    #[error("defect mask is empty")]
    EmptyMask,
    #[error("background ΔE sums to zero, severity is undefined")]
    UndefinedSeverity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// Lighter than the surrounding tint (gray spot).
    Light,
    /// Darker than the surrounding tint (solid spot).
    Dark,
}

impl Polarity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Polarity::Light => "light",
            Polarity::Dark => "dark",
        }
    }
}

impl std::str::FromStr for Polarity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "light" => Ok(Polarity::Light),
            "dark" => Ok(Polarity::Dark),
            other => Err(format!("unknown polarity {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    DeltaE,
    LStar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMethod {
    Otsu,
    Valley,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentConfig {
    pub channel: Channel,
    pub method: ThresholdMethod,
    pub bins: usize,
    pub min_size_px: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            channel: Channel::DeltaE,
            method: ThresholdMethod::Valley,
            bins: DEFAULT_BINS,
            min_size_px: DEFAULT_MIN_DEFECT_PX,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub counts: Vec<u64>,
    pub total: u64,
    pub value_range: (f64, f64),
}

impl Histogram {
    pub fn from_counts(counts: Vec<u64>, value_range: (f64, f64)) -> Self {
        let total = counts.iter().sum();
        Self {
            counts,
            total,
            value_range,
        }
    }

    /// Bins `values` uniformly over `[lo, hi]`; `hi` falls in the last bin.
    pub fn build(values: &[f64], bins: usize, lo: f64, hi: f64) -> Self {
        let mut counts = vec![0u64; bins.max(1)];
        for &v in values {
            counts[level_of(v, bins, lo, hi)] += 1;
        }
        Self::from_counts(counts, (lo, hi))
    }

    pub fn bin_count(&self) -> usize {
        self.counts.len()
    }

    pub fn populated_levels(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn level(&self, value: f64) -> usize {
        level_of(value, self.counts.len(), self.value_range.0, self.value_range.1)
    }
}

fn level_of(v: f64, bins: usize, lo: f64, hi: f64) -> usize {
    let bins = bins.max(1);
    if hi <= lo {
        return 0;
    }
    let pos = ((v - lo) / (hi - lo) * bins as f64).floor();
    if pos.is_nan() || pos < 0.0 {
        0
    } else {
        (pos as usize).min(bins - 1)
    }
}

/// `ω₁μ₁² + ω₂μ₂²` from class pixel counts `n` and level sums `s`. An empty
/// class contributes nothing.
pub fn between_class_objective(n1: u64, s1: u64, n2: u64, s2: u64, total: u64) -> f64 {
    let total = total as f64;
    let mut acc = 0.0;
    if n1 > 0 {
        let w1 = n1 as f64 / total;
        let mu1 = s1 as f64 / n1 as f64;
        acc += w1 * mu1 * mu1;
    }
    if n2 > 0 {
        let w2 = n2 as f64 / total;
        let mu2 = s2 as f64 / n2 as f64;
        acc += w2 * mu2 * mu2;
    }
    acc
}

/// The objective up to the constant factor `1 / total²`, as an exact
/// fraction `num / den`: `(s₁²n₂ + s₂²n₁) / (n₁n₂)`, with an empty class
/// dropping out, times the integer weight `w`. `None` on overflow.
fn objective_fraction(n1: u64, s1: u64, n2: u64, s2: u64, w: u64) -> Option<(u128, u128)> {
    let (n1, s1, n2, s2, w) = (n1 as u128, s1 as u128, n2 as u128, s2 as u128, w as u128);
    let (num, den) = match (n1, n2) {
        (0, _) => (s2.checked_mul(s2)?, n2),
        (_, 0) => (s1.checked_mul(s1)?, n1),
        _ => (
            s1.checked_mul(s1)?
                .checked_mul(n2)?
                .checked_add(s2.checked_mul(s2)?.checked_mul(n1)?)?,
            n1.checked_mul(n2)?,
        ),
    };
    Some((num.checked_mul(w)?, den))
}

/// Maximizes `weight(t) · objective(t)` over `t`, where `weight(t) =
/// weight_num(t) / total`. Comparisons are exact whenever the fractions fit
/// in 128 bits; the first maximum wins.
fn argmax_threshold(h: &Histogram, weight_num: impl Fn(usize) -> u64) -> Result<usize, SegmentError> {
    if h.populated_levels() < 2 {
        return Err(SegmentError::DegenerateHistogram);
    }
    let sum_all: u64 = h.counts.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
    let (mut n1, mut s1) = (0u64, 0u64);
    let mut best: Option<(usize, u64, u64, u64)> = None;
    for t in 0..h.counts.len() {
        let w = weight_num(t);
        let better = match best {
            None => true,
            Some((_, bn1, bs1, bw)) => {
                let (n2, s2) = (h.total - n1, sum_all - s1);
                let (bn2, bs2) = (h.total - bn1, sum_all - bs1);
                let exact = objective_fraction(n1, s1, n2, s2, w).zip(objective_fraction(bn1, bs1, bn2, bs2, bw));
                match exact.and_then(|((a, b), (c, d))| Some((a.checked_mul(d)?, c.checked_mul(b)?))) {
                    Some((lhs, rhs)) => lhs > rhs,
                    None => {
                        let total = h.total as f64;
                        let obj = w as f64 / total * between_class_objective(n1, s1, n2, s2, h.total);
                        let bobj = bw as f64 / total * between_class_objective(bn1, bs1, bn2, bs2, h.total);
                        obj > bobj
                    }
                }
            }
        };
        if better {
            best = Some((t, n1, s1, w));
        }
        n1 += h.counts[t];
        s1 += t as u64 * h.counts[t];
    }
    Ok(best.map(|b| b.0).unwrap_or(0))
}

/// Otsu's threshold level. Pixels at levels `≥ t` form the upper class.
pub fn otsu_threshold(h: &Histogram) -> Result<usize, SegmentError> {
    argmax_threshold(h, |_| h.total)
}

/// Valley-emphasis threshold level: Otsu's objective weighted by `1 − p(t)`.
pub fn valley_emphasis_threshold(h: &Histogram) -> Result<usize, SegmentError> {
    argmax_threshold(h, |t| h.total - h.counts[t])
}

pub fn threshold(h: &Histogram, method: ThresholdMethod) -> Result<usize, SegmentError> {
    match method {
        ThresholdMethod::Otsu => otsu_threshold(h),
        ThresholdMethod::Valley => valley_emphasis_threshold(h),
    }
}

/// Keeps the largest 8-connected component of `mask` (first in raster
/// order on ties).
pub fn largest_component(mask: &[bool], width: usize, height: usize) -> Vec<bool> {
    let mut label = vec![0u32; mask.len()];
    let mut best: (u32, usize) = (0, 0);
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        stack.push(start);
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = ((i % width) as isize, (i / width) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                        continue;
                    }
                    let j = ny as usize * width + nx as usize;
                    if mask[j] && label[j] == 0 {
                        label[j] = next;
                        stack.push(j);
                    }
                }
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    label.iter().map(|&l| l != 0 && l == best.0).collect()
}

/// Segments the defect pixels of one block.
///
/// With [`Channel::DeltaE`] the defect is the upper class of the ΔE
/// histogram (binned over `[0, max ΔE]`). With [`Channel::LStar`] the
/// histogram covers `[min L*, max L*]` and the defect is whichever class
/// mean lies farther from the block's mean L*. Only the largest connected
/// component survives. A block without two distinct levels yields an
/// empty mask.
pub fn segment_defect(
    block: &BlockPixels,
    means: [f64; 3],
    channel: Channel,
    method: ThresholdMethod,
    bins: usize,
) -> Vec<bool> {
    let n = block.valid.len();
    let empty = vec![false; n];
    let values: Vec<f64> = match channel {
        Channel::DeltaE => block.delta_e(means),
        Channel::LStar => block.l.clone(),
    };
    let valid_values: Vec<f64> = (0..n).filter(|&i| block.valid[i]).map(|i| values[i]).collect();
    if valid_values.len() < 2 {
        return empty;
    }
    let (lo, hi) = match channel {
        Channel::DeltaE => (0.0, valid_values.iter().copied().fold(0.0, f64::max)),
        Channel::LStar => valid_values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))),
    };
    let hist = Histogram::build(&valid_values, bins, lo, hi);
    let Ok(t) = threshold(&hist, method) else {
        return empty;
    };

    let upper: Vec<bool> = (0..n)
        .map(|i| block.valid[i] && hist.level(values[i]) >= t)
        .collect();
    let chosen = match channel {
        Channel::DeltaE => upper,
        Channel::LStar => {
            let (mut s_up, mut n_up, mut s_lo, mut n_lo) = (0.0, 0usize, 0.0, 0usize);
            for i in (0..n).filter(|&i| block.valid[i]) {
                if upper[i] {
                    s_up += values[i];
                    n_up += 1;
                } else {
                    s_lo += values[i];
                    n_lo += 1;
                }
            }
            if n_up == 0 || n_lo == 0 {
                return empty;
            }
            let d_up = (s_up / n_up as f64 - means[0]).abs();
            let d_lo = (s_lo / n_lo as f64 - means[0]).abs();
            if d_up >= d_lo {
                upper
            } else {
                (0..n).map(|i| block.valid[i] && !upper[i]).collect()
            }
        }
    };
    largest_component(&chosen, block.width(), block.height())
}

/// `Σ_defect ΔE / Σ_background ΔE` over valid pixels; `None` when the
/// background sum is zero.
pub fn severity(mask: &[bool], delta_e: &[f64], valid: &[bool]) -> Option<f64> {
    let (mut defect, mut background) = (0.0, 0.0);
    for i in 0..mask.len() {
        if !valid[i] {
            continue;
        }
        if mask[i] {
            defect += delta_e[i];
        } else {
            background += delta_e[i];
        }
    }
    let s = defect / background;
    (background > 0.0 && s.is_finite()).then_some(s)
}

/// Full axis lengths of the ellipse with the same second moments as the
/// set of pixels, each pixel treated as a unit square.
pub fn ellipse_axes(points: impl Iterator<Item = (f64, f64)>) -> (f64, f64) {
    let pts: Vec<(f64, f64)> = points.collect();
    let n = pts.len() as f64;
    let (mx, my) = pts
        .iter()
        .fold((0.0, 0.0), |(sx, sy), &(x, y)| (sx + x, sy + y));
    let (mx, my) = (mx / n, my / n);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(x, y) in &pts {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    let pixel_var = 1.0 / 12.0;
    let (a, c, b) = (sxx / n + pixel_var, syy / n + pixel_var, sxy / n);
    let mid = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let major = 4.0 * (mid + rad).sqrt();
    let minor = 4.0 * (mid - rad).max(0.0).sqrt();
    (major, minor)
}

/// A segmented defect inside one block.
#[derive(Debug, Clone, PartialEq)]
pub struct DefectRegion {
    pub block_id: BlockId,
    /// Page coordinates of the block's top-left pixel.
    pub origin: (usize, usize),
    pub block_width: usize,
    pub block_height: usize,
    /// Row-major mask over the block.
    pub mask: Vec<bool>,
    pub size_px: usize,
    pub polarity: Polarity,
    pub major_axis_px: f64,
    pub minor_axis_px: f64,
    pub severity: f64,
    pub bbox: BBox,
}

impl DefectRegion {
    /// Page coordinates of the mask pixels.
    pub fn page_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| {
            (
                self.origin.0 + i % self.block_width,
                self.origin.1 + i / self.block_width,
            )
        })
    }
}

/// Size, polarity, equivalent-ellipse axes and severity of a defect mask.
pub fn defect_attributes(
    mask: &[bool],
    block: &BlockPixels,
    means: [f64; 3],
) -> Result<DefectRegion, AttributeError> {
    let w = block.width();
    let size_px = mask.iter().zip(&block.valid).filter(|(&m, &v)| m && v).count();
    if size_px == 0 {
        return Err(AttributeError::EmptyMask);
    }
    let mask: Vec<bool> = mask.iter().zip(&block.valid).map(|(&m, &v)| m && v).collect();

    let delta_e = block.delta_e(means);
    let severity = severity(&mask, &delta_e, &block.valid).ok_or(AttributeError::UndefinedSeverity)?;

    let mut sum_l = 0.0;
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (i % w, i / w);
        sum_l += block.l[i];
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x + 1);
        y1 = y1.max(y + 1);
    }
    let polarity = if sum_l / size_px as f64 > means[0] {
        Polarity::Light
    } else {
        Polarity::Dark
    };
    let (major, minor) = ellipse_axes(
        mask.iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| ((i % w) as f64, (i / w) as f64)),
    );
    let (ox, oy) = (block.window.x0, block.window.y0);

    Ok(DefectRegion {
        block_id: block.window.id,
        origin: (ox, oy),
        block_width: w,
        block_height: block.height(),
        mask,
        size_px,
        polarity,
        major_axis_px: major,
        minor_axis_px: minor,
        severity,
        bbox: BBox::new(ox + x0, oy + y0, ox + x1, oy + y1),
    })
}

/// Why the fine stage produced no defect for a candidate block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    EmptyMask,
    TooSmall,
    Attribute(AttributeError),
}

/// Segments a candidate block and characterizes the result, applying the
/// minimum-size floor.
pub fn characterize_block(
    block: &BlockPixels,
    means: [f64; 3],
    config: &SegmentConfig,
) -> Result<DefectRegion, Rejection> {
    let mask = segment_defect(block, means, config.channel, config.method, config.bins);
    let size = mask.iter().filter(|&&m| m).count();
    if size == 0 {
        return Err(Rejection::EmptyMask);
    }
    if size < config.min_size_px {
        return Err(Rejection::TooSmall);
    }
    defect_attributes(&mask, block, means).map_err(Rejection::Attribute)
}
