//! Block grids and per-block fluctuation metrics.
//!
//! A page is tiled twice: once from the page origin and once from an origin
//! shifted diagonally, so a defect that straddles a grid line or vertex on
//! one pass sits inside a block on the other. For every block we measure
//! how far pixels stray from the block's mean color (ΔE) and mean
//! lightness (ΔL), and summarize those deviations by their mean and sample
//! standard deviation.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::imaging::LabRaster;

pub const DEFAULT_BLOCK_SIZE: usize = 75;
pub const DEFAULT_GRID_SHIFT: usize = 35;
pub const DEFAULT_MIN_VALID_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridPass {
    Initial,
    Shifted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockId {
    pub pass: GridPass,
    pub row: u32,
    pub col: u32,
}

impl BlockId {
    pub fn new(pass: GridPass, row: u32, col: u32) -> Self {
        Self { pass, row, col }
    }
}

/// `I:row:col` for the initial grid, `S:row:col` for the shifted grid.
impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.pass {
            GridPass::Initial => 'I',
            GridPass::Shifted => 'S',
        };
        write!(f, "{tag}:{}:{}", self.row, self.col)
    }
}

impl FromStr for BlockId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split(':');
        let pass = match parts.next() {
            Some("I") => GridPass::Initial,
            Some("S") => GridPass::Shifted,
            _ => return Err(format!("bad block index {s:?}")),
        };
        let mut num = || -> Result<u32, String> {
            parts
                .next()
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| format!("bad block index {s:?}"))
        };
        let row = num()?;
        let col = num()?;
        if parts.next().is_some() {
            return Err(format!("bad block index {s:?}"));
        }
        Ok(BlockId { pass, row, col })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub block_size: usize,
    pub shift: usize,
    pub min_valid_fraction: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            block_size: DEFAULT_BLOCK_SIZE,
            shift: DEFAULT_GRID_SHIFT,
            min_valid_fraction: DEFAULT_MIN_VALID_FRACTION,
        }
    }
}

/// A rectangular block of the page, `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockWindow {
    pub id: BlockId,
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub valid_count: usize,
}

impl BlockWindow {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x < self.x1 as f64 && y >= self.y0 as f64 && y < self.y1 as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMetrics {
    pub id: BlockId,
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub mean_l: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    /// Mean ΔE.
    pub mde: f64,
    /// Sample standard deviation of ΔE.
    pub dde: f64,
    /// Mean |ΔL|.
    pub mdl: f64,
    /// Sample standard deviation of |ΔL|.
    pub ddl: f64,
    pub valid_count: usize,
}

impl BlockMetrics {
    pub fn window(&self) -> BlockWindow {
        BlockWindow {
            id: self.id,
            x0: self.x0,
            x1: self.x1,
            y0: self.y0,
            y1: self.y1,
            valid_count: self.valid_count,
        }
    }

    pub fn means(&self) -> [f64; 3] {
        [self.mean_l, self.mean_a, self.mean_b]
    }
}

/// Start coordinates of the grid cells along one axis.
fn cell_starts(extent: usize, origin: usize, size: usize) -> Vec<usize> {
    let origin = origin % size;
    let mut starts = Vec::new();
    if origin > 0 && extent > 0 {
        starts.push(0);
    }
    let mut s = origin;
    while s < extent {
        starts.push(s);
        s += size;
    }
    starts
}

/// Tiles the page with `block_size` cells from the pass origin. Partial
/// cells at the page edges keep their true extent; cells whose valid
/// fraction is below `min_valid_fraction` are dropped.
pub fn partition(raster: &LabRaster, pass: GridPass, config: &GridConfig) -> Vec<BlockWindow> {
    let origin = match pass {
        GridPass::Initial => 0,
        GridPass::Shifted => config.shift,
    };
    let size = config.block_size.max(1);
    let xs = cell_starts(raster.width, origin, size);
    let ys = cell_starts(raster.height, origin, size);
    let end = |starts: &[usize], i: usize, extent: usize| starts.get(i + 1).copied().unwrap_or(extent);

    let mut windows = Vec::new();
    for (row, &y0) in ys.iter().enumerate() {
        let y1 = end(&ys, row, raster.height);
        for (col, &x0) in xs.iter().enumerate() {
            let x1 = end(&xs, col, raster.width);
            let mut valid_count = 0;
            for y in y0..y1 {
                let base = y * raster.width;
                valid_count += raster.validity[base + x0..base + x1].iter().filter(|&&v| v).count();
            }
            let area = (x1 - x0) * (y1 - y0);
            if valid_count == 0 || (valid_count as f64) < config.min_valid_fraction * area as f64 {
                continue;
            }
            windows.push(BlockWindow {
                id: BlockId::new(pass, row as u32, col as u32),
                x0,
                x1,
                y0,
                y1,
                valid_count,
            });
        }
    }
    windows
}

/// Running mean and sum of squared deviations.
#[derive(Default)]
struct Welford {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn sample_std(&self) -> f64 {
        (self.m2 / (self.n - 1.0)).max(0.0).sqrt()
    }
}

/// Computes block means and the ΔE / ΔL statistics over the valid pixels
/// of `window`. Returns `None` when fewer than two pixels are valid.
pub fn compute_metrics(raster: &LabRaster, window: &BlockWindow) -> Option<BlockMetrics> {
    let mut n = 0usize;
    let mut sums = [0.0f64; 3];
    for y in window.y0..window.y1 {
        for x in window.x0..window.x1 {
            let i = raster.index(x, y);
            if raster.validity[i] {
                n += 1;
                sums[0] += raster.l[i] as f64;
                sums[1] += raster.a[i] as f64;
                sums[2] += raster.b[i] as f64;
            }
        }
    }
    if n < 2 {
        return None;
    }
    let mean = sums.map(|s| s / n as f64);

    let mut de = Welford::default();
    let mut dl = Welford::default();
    for y in window.y0..window.y1 {
        for x in window.x0..window.x1 {
            let i = raster.index(x, y);
            if !raster.validity[i] {
                continue;
            }
            let d_l = raster.l[i] as f64 - mean[0];
            let d_a = raster.a[i] as f64 - mean[1];
            let d_b = raster.b[i] as f64 - mean[2];
            de.push((d_l * d_l + d_a * d_a + d_b * d_b).sqrt());
            dl.push(d_l.abs());
        }
    }

    Some(BlockMetrics {
        id: window.id,
        x0: window.x0,
        x1: window.x1,
        y0: window.y0,
        y1: window.y1,
        mean_l: mean[0],
        mean_a: mean[1],
        mean_b: mean[2],
        mde: de.mean,
        dde: de.sample_std(),
        mdl: dl.mean,
        ddl: dl.sample_std(),
        valid_count: n,
    })
}

/// Metrics for every block of both grid passes, sorted by [`BlockId`].
pub fn dual_pass_metrics(raster: &LabRaster, config: &GridConfig) -> Vec<BlockMetrics> {
    let mut windows = partition(raster, GridPass::Initial, config);
    windows.extend(partition(raster, GridPass::Shifted, config));
    let mut metrics: Vec<BlockMetrics> = windows
        .par_iter()
        .filter_map(|w| {
            let m = compute_metrics(raster, w);
            if m.is_none() {
                log::debug!("block {} skipped: fewer than 2 valid pixels", w.id);
            }
            m
        })
        .collect();
    metrics.sort_by_key(|m| m.id);
    metrics
}

/// The pixels of one block, copied out of the page in f64.
#[derive(Debug, Clone)]
pub struct BlockPixels {
    pub window: BlockWindow,
    pub l: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub valid: Vec<bool>,
}

impl BlockPixels {
    pub fn extract(raster: &LabRaster, window: &BlockWindow) -> Self {
        let n = window.area();
        let mut out = Self {
            window: *window,
            l: Vec::with_capacity(n),
            a: Vec::with_capacity(n),
            b: Vec::with_capacity(n),
            valid: Vec::with_capacity(n),
        };
        for y in window.y0..window.y1 {
            for x in window.x0..window.x1 {
                let i = raster.index(x, y);
                out.l.push(raster.l[i] as f64);
                out.a.push(raster.a[i] as f64);
                out.b.push(raster.b[i] as f64);
                out.valid.push(raster.validity[i]);
            }
        }
        out
    }

    pub fn width(&self) -> usize {
        self.window.width()
    }

    pub fn height(&self) -> usize {
        self.window.height()
    }

    /// Per-pixel ΔE from the given block means; 0 at invalid pixels.
    pub fn delta_e(&self, means: [f64; 3]) -> Vec<f64> {
        (0..self.l.len())
            .map(|i| {
                if !self.valid[i] {
                    return 0.0;
                }
                let dl = self.l[i] - means[0];
                let da = self.a[i] - means[1];
                let db = self.b[i] - means[2];
                (dl * dl + da * da + db * db).sqrt()
            })
            .collect()
    }
}
