//! Brute-force reference implementations and page fixtures shared by the
//! integration tests.
#![allow(dead_code)]

use printdefect::blockgrid::{compute_metrics, BlockId, BlockMetrics, BlockPixels, BlockWindow, GridPass};
use printdefect::candidates::CandidateSet;
use printdefect::dataset::{overlap_fraction, TruthRegion, LABEL_MIN_OVERLAP};
use printdefect::imaging::{LabRaster, SrgbRaster};
use printdefect::synthpage::{generate, scatter_defects, standard_layout, Scatter};
use printdefect::BBox;
use rand::Rng;

/// Salt used for spot placement throughout the tests.
pub const SPOT_SALT: u64 = 7;

/// `[mean L, mean a, mean b, MDE, DDE, MDL, DDL]` by the textbook two-pass
/// formulas over the valid pixels of a window.
pub fn two_pass_metrics(r: &LabRaster, w: &BlockWindow) -> Option<[f64; 7]> {
    let idx: Vec<usize> = (w.y0..w.y1)
        .flat_map(|y| (w.x0..w.x1).map(move |x| y * r.width + x))
        .filter(|&i| r.validity[i])
        .collect();
    let n = idx.len() as f64;
    if idx.len() < 2 {
        return None;
    }
    let mean = |v: &[f32]| idx.iter().map(|&i| v[i] as f64).sum::<f64>() / n;
    let (ml, ma, mb) = (mean(&r.l), mean(&r.a), mean(&r.b));
    let de: Vec<f64> = idx
        .iter()
        .map(|&i| {
            let (dl, da, db) = (r.l[i] as f64 - ml, r.a[i] as f64 - ma, r.b[i] as f64 - mb);
            (dl * dl + da * da + db * db).sqrt()
        })
        .collect();
    let dl: Vec<f64> = idx.iter().map(|&i| (r.l[i] as f64 - ml).abs()).collect();
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        (m, var.sqrt())
    };
    let (mde, dde) = stats(&de);
    let (mdl, ddl) = stats(&dl);
    Some([ml, ma, mb, mde, dde, mdl, ddl])
}

pub fn metrics_array(m: &BlockMetrics) -> [f64; 7] {
    [m.mean_l, m.mean_a, m.mean_b, m.mde, m.dde, m.mdl, m.ddl]
}

/// Relative error with an absolute floor for values near zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// A Lab raster with a random smooth field, random speckle and a random mask.
pub fn random_lab(rng: &mut impl Rng, width: usize, height: usize, masked: f64) -> LabRaster {
    let base = [rng.random_range(5.0..95.0f32), rng.random_range(-60.0..60.0f32), rng.random_range(-60.0..60.0f32)];
    let spread = rng.random_range(0.0..20.0f32);
    let mut r = LabRaster::uniform(width, height, base, 600);
    for i in 0..width * height {
        r.l[i] = (base[0] + spread * rng.random_range(-1.0..1.0f32)).clamp(0.0, 100.0);
        r.a[i] = base[1] + spread * rng.random_range(-1.0..1.0f32);
        r.b[i] = base[2] + spread * rng.random_range(-1.0..1.0f32);
        r.validity[i] = !rng.random_bool(masked);
    }
    r
}

/// Which tie-breaking objective to maximize.
#[derive(Clone, Copy, Debug)]
pub enum Objective {
    Otsu,
    Valley,
}

/// Exhaustive argmax of the between-class objective, evaluated from scratch
/// for each threshold and compared as exact fractions. Class 1 holds the
/// levels below `t`. The smallest maximizing `t` wins. `None` when fewer
/// than two levels are populated.
pub fn exhaustive_threshold(counts: &[u64], objective: Objective) -> Option<usize> {
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let total: u128 = counts.iter().map(|&c| c as u128).sum();
    // value(t) = num / den, proportional to the objective.
    let value = |t: usize| -> (u128, u128) {
        let n1: u128 = counts[..t].iter().map(|&c| c as u128).sum();
        let s1: u128 = counts[..t].iter().enumerate().map(|(i, &c)| i as u128 * c as u128).sum();
        let n2: u128 = counts[t..].iter().map(|&c| c as u128).sum();
        let s2: u128 = counts[t..].iter().enumerate().map(|(i, &c)| (i + t) as u128 * c as u128).sum();
        let (num, den) = if n1 == 0 {
            (s2 * s2, n2)
        } else if n2 == 0 {
            (s1 * s1, n1)
        } else {
            (s1 * s1 * n2 + s2 * s2 * n1, n1 * n2)
        };
        match objective {
            Objective::Otsu => (num, den),
            Objective::Valley => (num * (total - counts[t] as u128), den),
        }
    };
    let mut best = 0;
    let mut best_v = value(0);
    for t in 1..counts.len() {
        let v = value(t);
        if v.0 * best_v.1 > best_v.0 * v.1 {
            best = t;
            best_v = v;
        }
    }
    Some(best)
}

/// A standard-layout page with `count` scattered spots.
pub fn spotted_page(seed: u64, scatter: &Scatter) -> (SrgbRaster, Vec<TruthRegion>) {
    let mut spec = standard_layout(seed);
    spec.defects = scatter_defects(&spec, scatter, SPOT_SALT).unwrap();
    generate(&spec).unwrap()
}

/// Whether some candidate block holds at least the labelling share of the
/// spot.
pub fn spot_covered(truth: &TruthRegion, metrics: &[BlockMetrics], candidates: &CandidateSet) -> bool {
    metrics.iter().any(|m| {
        candidates.contains(&m.id)
            && overlap_fraction(&BBox::new(m.x0, m.y0, m.x1, m.y1), truth) >= LABEL_MIN_OVERLAP
    })
}

/// The whole raster as one block, with its means.
pub fn block_of(lab: &LabRaster) -> (BlockPixels, [f64; 3]) {
    let w = BlockWindow {
        id: BlockId::new(GridPass::Initial, 0, 0),
        x0: 0,
        x1: lab.width,
        y0: 0,
        y1: lab.height,
        valid_count: lab.width * lab.height,
    };
    let m = compute_metrics(lab, &w).unwrap();
    (BlockPixels::extract(lab, &w), m.means())
}

pub fn disk(cx: f64, cy: f64, r: f64) -> impl Fn(usize, usize) -> bool {
    move |x, y| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        dx * dx + dy * dy <= r * r
    }
}
