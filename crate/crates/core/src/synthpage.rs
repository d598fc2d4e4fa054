//! Synthetic scanned test pages with known defects.
//!
//! A page is a set of constant-tint rectangles rendered as a clustered-dot
//! halftone, with Gaussian lightness bumps (gray spots) or dips (solid
//! spots) applied to the continuous tone before screening, and additive
//! scanner noise afterwards. Everything outside the tint rectangles, and
//! inside explicit mask rectangles, is masked out through alpha.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::TruthRegion;
use crate::error::{Error, Result};
use crate::geom::BBox;
use crate::imaging::{lab_to_srgb, srgb_to_lab, SrgbRaster, DEFAULT_DPI};
use crate::segmentation::Polarity;

pub const DEFAULT_CELL_PERIOD: usize = 8;

/// Noise sigma is given in L* units; this converts it to 8-bit code values.
const CODES_PER_LSTAR: f64 = 2.55;

/// 1 / sqrt(2 ln 2): converts a half-width at half-maximum to a standard
/// deviation.
const HWHM_TO_SIGMA: f64 = 0.849_321_800_288_019;

fn default_dpi() -> u32 {
    DEFAULT_DPI
}

fn default_cell_period() -> usize {
    DEFAULT_CELL_PERIOD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TintRegion {
    pub rect: BBox,
    /// Nominal sRGB tint.
    pub color: [u8; 3],
    #[serde(default = "default_cell_period")]
    pub cell_period: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    pub center: [f64; 2],
    /// Semi-axis of the defect footprint in pixels: the distance at which
    /// the Gaussian profile falls to half its peak.
    pub radius: f64,
    /// Second semi-axis for elongated defects; defaults to `radius`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius_minor: Option<f64>,
    #[serde(default)]
    pub angle_deg: f64,
    pub polarity: Polarity,
    /// Peak |ΔL*|.
    pub contrast: f64,
}

impl DefectSpec {
    pub fn round(center: [f64; 2], radius: f64, polarity: Polarity, contrast: f64) -> Self {
        Self {
            center,
            radius,
            radius_minor: None,
            angle_deg: 0.0,
            polarity,
            contrast,
        }
    }

    fn semi_axes(&self) -> [f64; 2] {
        [self.radius, self.radius_minor.unwrap_or(self.radius)]
    }

    pub fn truth(&self) -> TruthRegion {
        TruthRegion {
            polarity: self.polarity,
            center: self.center,
            semi_axes: self.semi_axes(),
            angle_deg: self.angle_deg,
        }
    }

    /// Signed ΔL* contributed at `(x, y)`.
    pub fn offset_at(&self, x: f64, y: f64) -> f64 {
        let [ra, rb] = self.semi_axes();
        let (sa, sb) = (ra * HWHM_TO_SIGMA, rb * HWHM_TO_SIGMA);
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let e = (-(u * u / (2.0 * sa * sa) + v * v / (2.0 * sb * sb))).exp();
        let sign = match self.polarity {
            Polarity::Light => 1.0,
            Polarity::Dark => -1.0,
        };
        sign * self.contrast * e
    }

    /// Pixels beyond this box receive a negligible offset.
    fn support(&self) -> (f64, f64, f64, f64) {
        let reach = 4.0 * HWHM_TO_SIGMA * self.semi_axes()[0].max(self.semi_axes()[1]) + 2.0;
        (
            self.center[0] - reach,
            self.center[1] - reach,
            self.center[0] + reach,
            self.center[1] + reach,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageSpec {
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_dpi")]
    pub dpi: u32,
    pub regions: Vec<TintRegion>,
    #[serde(default)]
    pub defects: Vec<DefectSpec>,
    /// Excluded areas (alpha 0) on top of the regions.
    #[serde(default)]
    pub masks: Vec<BBox>,
    /// Sensor noise standard deviation in L* units.
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl PageSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.width == 0 || self.height == 0 || self.dpi == 0 {
            return bad("page size and dpi must be positive".into());
        }
        for (i, r) in self.regions.iter().enumerate() {
            if r.rect.x1 > self.width || r.rect.y1 > self.height || r.rect.x0 >= r.rect.x1 || r.rect.y0 >= r.rect.y1 {
                return bad(format!("region {i} is empty or outside the page"));
            }
            if r.cell_period == 0 {
                return bad(format!("region {i} has a zero halftone period"));
            }
        }
        for (i, d) in self.defects.iter().enumerate() {
            if d.radius.is_nan() || d.radius <= 0.0 || d.radius_minor.is_some_and(|r| r.is_nan() || r <= 0.0) {
                return bad(format!("defect {i} must have a positive radius"));
            }
            if d.contrast.is_nan() || d.contrast < 0.0 {
                return bad(format!("defect {i} has a negative contrast"));
            }
            let inside = self.regions.iter().any(|r| {
                d.center[0] >= r.rect.x0 as f64
                    && d.center[0] < r.rect.x1 as f64
                    && d.center[1] >= r.rect.y0 as f64
                    && d.center[1] < r.rect.y1 as f64
            });
            if !inside {
                return bad(format!("defect {i} lies outside every tint region"));
            }
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return bad("noise sigma must be non-negative".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: PageSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Signed ΔL* of the continuous-tone field at `(x, y)`.
    pub fn lightness_offset(&self, x: f64, y: f64) -> f64 {
        self.defects.iter().map(|d| d.offset_at(x, y)).sum()
    }
}

/// Threshold matrix of a 45° clustered-dot screen with period `period`,
/// values in (0, 1). Dots grow from the cell corners and center.
pub fn clustered_dot_screen(period: usize) -> Vec<f64> {
    let p = period as f64;
    let n = period * period;
    let spot: Vec<f64> = (0..n)
        .map(|i| {
            let (x, y) = ((i % period) as f64 + 0.5, (i / period) as f64 + 0.5);
            (2.0 * std::f64::consts::PI * x / p).cos() * (2.0 * std::f64::consts::PI * y / p).cos()
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| spot[b].total_cmp(&spot[a]).then(a.cmp(&b)));
    let mut t = vec![0.0; n];
    for (rank, &i) in order.iter().enumerate() {
        t[i] = 1.0 - (rank as f64 + 0.5) / n as f64;
    }
    t
}

/// Unprinted fraction of a screened pixel with threshold `t` for a tone in
/// [0, 1]. The pixel on the growing edge of a dot is partly inked, so a
/// cell reproduces the tone exactly rather than in `n + 1` steps.
fn screened(tone: f64, t: f64, n: usize) -> f64 {
    ((tone - t) * n as f64 + 0.5).clamp(0.0, 1.0)
}

/// Renders the page and returns it with its ground truth.
pub fn generate(spec: &PageSpec) -> Result<(SrgbRaster, Vec<TruthRegion>)> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut tone = vec![[255.0f64; 3]; w * h];
    let mut screen_of = vec![usize::MAX; w * h];
    let mut validity = vec![false; w * h];

    let screens: Vec<Vec<f64>> = spec.regions.iter().map(|r| clustered_dot_screen(r.cell_period)).collect();
    for (ri, region) in spec.regions.iter().enumerate() {
        let tint = region.color.map(|c| c as f64);
        for y in region.rect.y0..region.rect.y1 {
            for x in region.rect.x0..region.rect.x1 {
                let i = y * w + x;
                tone[i] = tint;
                screen_of[i] = ri;
                validity[i] = true;
            }
        }
    }

    // Defects perturb lightness of the continuous tone, within the tint
    // region that holds each pixel.
    let mut offset = vec![0.0f64; w * h];
    for d in &spec.defects {
        let (x0, y0, x1, y1) = d.support();
        let xs = (x0.floor().max(0.0) as usize)..(x1.ceil().min(w as f64) as usize);
        let ys = (y0.floor().max(0.0) as usize)..(y1.ceil().min(h as f64) as usize);
        for y in ys {
            for x in xs.clone() {
                offset[y * w + x] += d.offset_at(x as f64 + 0.5, y as f64 + 0.5);
            }
        }
    }
    for i in 0..w * h {
        if screen_of[i] == usize::MAX || offset[i] == 0.0 {
            continue;
        }
        let mut lab = srgb_to_lab(tone[i]);
        lab[0] = (lab[0] + offset[i]).clamp(0.0, 100.0);
        tone[i] = lab_to_srgb(lab).map(|c| c.clamp(0.0, 255.0));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = (spec.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, spec.noise_sigma * CODES_PER_LSTAR).expect("finite sigma"));
    let mut pixels = vec![[255u8; 3]; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let ri = screen_of[i];
            let mut px = [255.0f64; 3];
            if ri != usize::MAX {
                let p = spec.regions[ri].cell_period;
                let t = screens[ri][(y % p) * p + (x % p)];
                for c in 0..3 {
                    px[c] = 255.0 * screened(tone[i][c] / 255.0, t, p * p);
                }
            }
            let n = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
            pixels[i] = px.map(|v| (v + n).round().clamp(0.0, 255.0) as u8);
        }
    }

    for m in &spec.masks {
        for y in m.y0..m.y1.min(h) {
            for x in m.x0..m.x1.min(w) {
                validity[y * w + x] = false;
            }
        }
    }

    let raster = SrgbRaster::new(w, h, pixels, validity, spec.dpi)?;
    let truth = spec.defects.iter().map(DefectSpec::truth).collect();
    Ok((raster, truth))
}

/// Tints used by the standard test layout.
pub const STANDARD_TINTS: [[u8; 3]; 2] = [[60, 150, 200], [200, 90, 120]];

pub const STANDARD_NOISE_SIGMA: f64 = 1.0;
/// Screen period of the standard layout: a fine laser-printer screen at
/// 600 dpi. The descreening filter removes it almost completely, whereas
/// the residual of the default 8-px screen hides faint spots.
pub const STANDARD_CELL_PERIOD: usize = 4;

/// A 1500×1050 page with two tint rectangles separated by an unprinted
/// gutter, surrounded by an unprinted margin.
pub fn standard_layout(seed: u64) -> PageSpec {
    PageSpec {
        width: 1500,
        height: 1050,
        dpi: DEFAULT_DPI,
        regions: vec![
            TintRegion {
                rect: BBox::new(60, 60, 735, 990),
                color: STANDARD_TINTS[0],
                cell_period: STANDARD_CELL_PERIOD,
                name: Some("steel".into()),
            },
            TintRegion {
                rect: BBox::new(765, 60, 1440, 990),
                color: STANDARD_TINTS[1],
                cell_period: STANDARD_CELL_PERIOD,
                name: Some("rose".into()),
            },
        ],
        defects: Vec::new(),
        masks: Vec::new(),
        noise_sigma: STANDARD_NOISE_SIGMA,
        seed,
    }
}

/// Options for [`scatter_defects`].
#[derive(Debug, Clone, Copy)]
pub struct Scatter {
    pub count: usize,
    pub radius: (f64, f64),
    pub contrast: (f64, f64),
    /// Keep centers at least this far from region edges.
    pub margin: f64,
    /// Minimum center-to-center distance.
    pub min_separation: f64,
    /// Snap centers to vertices of a grid with this spacing.
    pub snap_to_grid: Option<usize>,
}

impl Default for Scatter {
    fn default() -> Self {
        Self {
            count: 10,
            radius: (10.0, 15.0),
            contrast: (6.0, 10.0),
            margin: 40.0,
            min_separation: 150.0,
            snap_to_grid: None,
        }
    }
}

/// Places well-separated round defects of random polarity inside the
/// spec's regions. Deterministic for a given spec seed and salt.
pub fn scatter_defects(spec: &PageSpec, opts: &Scatter, salt: u64) -> Result<Vec<DefectSpec>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut out: Vec<DefectSpec> = Vec::new();
    let mut attempts = 0;
    while out.len() < opts.count {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::InvalidSpec(format!(
                "could not place {} separated defects",
                opts.count
            )));
        }
        let region = &spec.regions[rng.random_range(0..spec.regions.len())].rect;
        let lo_x = region.x0 as f64 + opts.margin;
        let hi_x = region.x1 as f64 - opts.margin;
        let lo_y = region.y0 as f64 + opts.margin;
        let hi_y = region.y1 as f64 - opts.margin;
        if lo_x >= hi_x || lo_y >= hi_y {
            continue;
        }
        let mut center = [rng.random_range(lo_x..hi_x), rng.random_range(lo_y..hi_y)];
        if let Some(g) = opts.snap_to_grid {
            let g = g as f64;
            center = center.map(|c| (c / g).round() * g);
            if center[0] < lo_x || center[0] >= hi_x || center[1] < lo_y || center[1] >= hi_y {
                continue;
            }
        }
        let far = out.iter().all(|d| {
            let (dx, dy) = (d.center[0] - center[0], d.center[1] - center[1]);
            (dx * dx + dy * dy).sqrt() >= opts.min_separation
        });
        if !far {
            continue;
        }
        let radius = rng.random_range(opts.radius.0..=opts.radius.1);
        let contrast = rng.random_range(opts.contrast.0..=opts.contrast.1);
        let polarity = if rng.random_bool(0.5) {
            Polarity::Light
        } else {
            Polarity::Dark
        };
        out.push(DefectSpec::round(center, radius, polarity, contrast));
    }
    Ok(out)
}

/// Defect-free pages used to calibrate the default candidate threshold.
pub fn calibration_pages() -> Vec<PageSpec> {
    (0..4).map(|s| standard_layout(1000 + s)).collect()
}
