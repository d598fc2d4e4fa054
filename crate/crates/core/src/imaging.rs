//! Page preprocessing: loading scans with their content mask, halftone
//! descreening, and sRGB to CIELAB conversion.
//!
//! The alpha channel of a scanned page is its content mask. A pixel with
//! alpha 0 is excluded from every downstream computation, including the
//! descreening filter itself.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb, Rgba};
use rayon::prelude::*;

use crate::error::{Error, Result};

pub const DEFAULT_DPI: u32 = 600;

/// Number of taps per axis of the descreening kernel.
pub const DESCREEN_TAPS: usize = 12;
/// Standard deviation of the descreening kernel, in pixels.
pub const DESCREEN_SIGMA: f64 = 2.0;

/// D65 reference white, 2° observer.
pub const D65_WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const XYZ_TO_SRGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];

const LAB_EPSILON: f64 = 216.0 / 24389.0;
const LAB_KAPPA: f64 = 24389.0 / 27.0;

/// An 8-bit sRGB page with its per-pixel content mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SrgbRaster {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
    validity: Vec<bool>,
    dpi: u32,
}

impl SrgbRaster {
    pub fn new(
        width: usize,
        height: usize,
        pixels: Vec<[u8; 3]>,
        validity: Vec<bool>,
        dpi: u32,
    ) -> Result<Self> {
        if pixels.len() != width * height || validity.len() != width * height {
            return Err(Error::InvalidRaster(format!(
                "expected {} pixels for {width}x{height}, got {} pixels and {} mask entries",
                width * height,
                pixels.len(),
                validity.len()
            )));
        }
        if dpi == 0 {
            return Err(Error::InvalidRaster("dpi must be positive".into()));
        }
        Ok(Self {
            width,
            height,
            pixels,
            validity,
            dpi,
        })
    }

    /// A fully valid raster filled with one color.
    pub fn filled(width: usize, height: usize, color: [u8; 3], dpi: u32) -> Result<Self> {
        Self::new(
            width,
            height,
            vec![color; width * height],
            vec![true; width * height],
            dpi,
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dpi(&self) -> u32 {
        self.dpi
    }

    pub fn set_dpi(&mut self, dpi: u32) -> Result<()> {
        if dpi == 0 {
            return Err(Error::InvalidRaster("dpi must be positive".into()));
        }
        self.dpi = dpi;
        Ok(())
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [[u8; 3]] {
        &mut self.pixels
    }

    pub fn validity(&self) -> &[bool] {
        &self.validity
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.validity[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.validity.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }
}

/// A page in CIELAB. Invalid pixels carry L = a = b = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LabRaster {
    pub width: usize,
    pub height: usize,
    pub dpi: u32,
    pub l: Vec<f32>,
    pub a: Vec<f32>,
    pub b: Vec<f32>,
    pub validity: Vec<bool>,
}

impl LabRaster {
    /// A fully valid raster of one color, mostly for tests.
    pub fn uniform(width: usize, height: usize, lab: [f32; 3], dpi: u32) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            dpi,
            l: vec![lab[0]; n],
            a: vec![lab[1]; n],
            b: vec![lab[2]; n],
            validity: vec![true; n],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }
}

/// Loads a PNG page. The alpha channel, when present, becomes the validity
/// mask (nonzero alpha = content to analyze).
pub fn load_page(path: impl AsRef<Path>) -> Result<SrgbRaster> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|source| Error::PageRead {
        path: path.to_path_buf(),
        source,
    })?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let (pixels, validity): (Vec<[u8; 3]>, Vec<bool>) = match img {
        DynamicImage::ImageRgba8(buf) => buf
            .pixels()
            .map(|p| ([p[0], p[1], p[2]], p[3] != 0))
            .unzip(),
        DynamicImage::ImageRgb8(buf) => buf.pixels().map(|p| ([p[0], p[1], p[2]], true)).unzip(),
        DynamicImage::ImageLumaA8(buf) => buf
            .pixels()
            .map(|p| ([p[0], p[0], p[0]], p[1] != 0))
            .unzip(),
        DynamicImage::ImageLuma8(buf) => buf.pixels().map(|p| ([p[0], p[0], p[0]], true)).unzip(),
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                format: format!("{:?}", other.color()),
            })
        }
    };
    SrgbRaster::new(width, height, pixels, validity, DEFAULT_DPI)
}

/// Writes an RGBA PNG with alpha 255 for valid pixels and 0 elsewhere.
pub fn save_page(raster: &SrgbRaster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = ImageBuffer::<Rgba<u8>, Vec<u8>>::new(raster.width as u32, raster.height as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        let [r, g, b] = raster.pixels[i];
        *px = Rgba([r, g, b, if raster.validity[i] { 255 } else { 0 }]);
    }
    buf.save(path).map_err(|source| Error::PageWrite {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes an opaque RGB PNG, ignoring the mask.
pub fn save_rgb(raster: &SrgbRaster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(raster.width as u32, raster.height as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        *px = Rgb(raster.pixels[i]);
    }
    buf.save(path).map_err(|source| Error::PageWrite {
        path: path.to_path_buf(),
        source,
    })
}

/// Normalized 1-D descreening kernel. Taps sit at offsets `k - 5.5`, so
/// the 12-tap kernel is symmetric about a half-pixel position.
pub fn descreen_kernel() -> [f64; DESCREEN_TAPS] {
    let mut k = [0.0; DESCREEN_TAPS];
    let center = (DESCREEN_TAPS as f64 - 1.0) / 2.0;
    for (i, w) in k.iter_mut().enumerate() {
        let d = i as f64 - center;
        *w = (-d * d / (2.0 * DESCREEN_SIGMA * DESCREEN_SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= sum);
    k
}

/// Offset of tap 0 relative to the output pixel.
const TAP_ORIGIN: isize = -(DESCREEN_TAPS as isize / 2);

/// Removes halftone structure with a 12×12 Gaussian (σ = 2 px).
///
/// The filter is separable. Masked pixels contribute nothing, and each
/// output pixel is renormalized by the kernel mass that fell on valid,
/// in-bounds pixels. Masked pixels are copied through unchanged.
pub fn descreen(raster: &SrgbRaster) -> SrgbRaster {
    let (w, h) = (raster.width, raster.height);
    if raster.is_empty() || raster.valid_count() == 0 {
        return raster.clone();
    }
    let kernel = descreen_kernel();

    // Premultiplied channels plus the mask as a fourth plane.
    let src: Vec<[f64; 4]> = raster
        .pixels
        .iter()
        .zip(&raster.validity)
        .map(|(p, &v)| {
            if v {
                [p[0] as f64, p[1] as f64, p[2] as f64, 1.0]
            } else {
                [0.0; 4]
            }
        })
        .collect();

    let mut horiz = vec![[0.0f64; 4]; w * h];
    horiz
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(y, row_out)| {
            let row = &src[y * w..(y + 1) * w];
            for (x, out) in row_out.iter_mut().enumerate() {
                let mut acc = [0.0; 4];
                for (k, &wk) in kernel.iter().enumerate() {
                    let sx = x as isize + TAP_ORIGIN + k as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let s = &row[sx as usize];
                    for c in 0..4 {
                        acc[c] += wk * s[c];
                    }
                }
                *out = acc;
            }
        });

    let mut pixels = raster.pixels.clone();
    pixels
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(y, row_out)| {
            for (x, out) in row_out.iter_mut().enumerate() {
                if !raster.validity[y * w + x] {
                    continue;
                }
                let mut acc = [0.0; 4];
                for (k, &wk) in kernel.iter().enumerate() {
                    let sy = y as isize + TAP_ORIGIN + k as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = &horiz[sy as usize * w + x];
                    for c in 0..4 {
                        acc[c] += wk * s[c];
                    }
                }
                // acc[3] > 0: the pixel itself is valid and every tap weight is positive.
                for c in 0..3 {
                    out[c] = (acc[c] / acc[3]).round().clamp(0.0, 255.0) as u8;
                }
            }
        });

    SrgbRaster {
        pixels,
        ..raster.clone()
    }
}

fn srgb_decode(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn srgb_encode(v: f64) -> f64 {
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > LAB_EPSILON {
        t.cbrt()
    } else {
        (LAB_KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let t = f * f * f;
    if t > LAB_EPSILON {
        t
    } else {
        (116.0 * f - 16.0) / LAB_KAPPA
    }
}

fn linear_to_lab(lin: [f64; 3]) -> [f64; 3] {
    let m = &SRGB_TO_XYZ;
    let xyz = [
        m[0][0] * lin[0] + m[0][1] * lin[1] + m[0][2] * lin[2],
        m[1][0] * lin[0] + m[1][1] * lin[1] + m[1][2] * lin[2],
        m[2][0] * lin[0] + m[2][1] * lin[1] + m[2][2] * lin[2],
    ];
    let fx = lab_f(xyz[0] / D65_WHITE[0]);
    let fy = lab_f(xyz[1] / D65_WHITE[1]);
    let fz = lab_f(xyz[2] / D65_WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Converts one sRGB color (channels in 0..=255, may be fractional) to CIELAB.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    linear_to_lab(rgb.map(|c| srgb_decode(c / 255.0)))
}

/// Inverse of [`srgb_to_lab`]. The result is not clamped to the sRGB gamut.
pub fn lab_to_srgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [
        lab_f_inv(fx) * D65_WHITE[0],
        lab_f_inv(fy) * D65_WHITE[1],
        lab_f_inv(fz) * D65_WHITE[2],
    ];
    let m = &XYZ_TO_SRGB;
    let lin = [
        m[0][0] * xyz[0] + m[0][1] * xyz[1] + m[0][2] * xyz[2],
        m[1][0] * xyz[0] + m[1][1] * xyz[1] + m[1][2] * xyz[2],
        m[2][0] * xyz[0] + m[2][1] * xyz[1] + m[2][2] * xyz[2],
    ];
    lin.map(|c| 255.0 * srgb_encode(c.max(0.0)))
}

/// Converts a page to CIELAB (sRGB, D65 white, 2° observer).
pub fn to_lab(raster: &SrgbRaster) -> LabRaster {
    let decode: Vec<f64> = (0..=255u8).map(|v| srgb_decode(v as f64 / 255.0)).collect();
    let n = raster.width * raster.height;
    let lab: Vec<[f32; 3]> = raster
        .pixels
        .par_iter()
        .zip(raster.validity.par_iter())
        .map(|(p, &valid)| {
            if !valid {
                return [0.0; 3];
            }
            let lab = linear_to_lab([
                decode[p[0] as usize],
                decode[p[1] as usize],
                decode[p[2] as usize],
            ]);
            [lab[0].clamp(0.0, 100.0) as f32, lab[1] as f32, lab[2] as f32]
        })
        .collect();
    let mut out = LabRaster {
        width: raster.width,
        height: raster.height,
        dpi: raster.dpi,
        l: Vec::with_capacity(n),
        a: Vec::with_capacity(n),
        b: Vec::with_capacity(n),
        validity: raster.validity.clone(),
    };
    for [l, a, b] in lab {
        out.l.push(l);
        out.a.push(a);
        out.b.push(b);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(w: usize, h: usize, v: u8) -> SrgbRaster {
        SrgbRaster::filled(w, h, [v, v, v], DEFAULT_DPI).unwrap()
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = descreen_kernel();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..DESCREEN_TAPS {
            assert!((k[i] - k[DESCREEN_TAPS - 1 - i]).abs() < 1e-15);
        }
        // Peak pair at offsets ±0.5.
        assert!(k[5] > k[4] && k[6] > k[7]);
    }

    #[test]
    fn descreen_keeps_constant_raster() {
        let r = gray(40, 30, 137);
        assert_eq!(descreen(&r), r);
    }

    #[test]
    fn descreen_reproduces_kernel_around_impulse() {
        let mut r = gray(32, 32, 0);
        r.pixels_mut()[16 * 32 + 16] = [255; 3];
        let out = descreen(&r);
        let k = descreen_kernel();
        // Output (x, y) reads input x + k - 6, so the impulse at 16 lands in
        // tap 22 - x.
        for y in 11..=22 {
            for x in 11..=22 {
                let expected = 255.0 * k[22 - x] * k[22 - y];
                let got = out.pixel(x, y)[0] as f64;
                assert!((got - expected).abs() <= 0.5, "({x},{y}) {got} vs {expected}");
            }
        }
        assert_eq!(out.pixel(10, 16), [0; 3]);
        assert_eq!(out.pixel(16, 23), [0; 3]);
    }

    #[test]
    fn descreen_ignores_masked_pixels() {
        let w = 20;
        let mut validity = vec![true; w * w];
        let mut pixels = vec![[100u8; 3]; w * w];
        for y in 0..w {
            for x in 10..w {
                validity[y * w + x] = false;
                pixels[y * w + x] = [255, 0, 0];
            }
        }
        let r = SrgbRaster::new(w, w, pixels, validity, 600).unwrap();
        let out = descreen(&r);
        for y in 0..w {
            for x in 0..10 {
                assert_eq!(out.pixel(x, y), [100; 3]);
            }
            for x in 10..w {
                assert_eq!(out.pixel(x, y), [255, 0, 0]);
            }
        }
    }

    #[test]
    fn fully_masked_raster_passes_through() {
        let r = SrgbRaster::new(4, 4, vec![[9, 8, 7]; 16], vec![false; 16], 600).unwrap();
        assert_eq!(descreen(&r), r);
        let lab = to_lab(&r);
        assert!(lab.l.iter().all(|&v| v == 0.0));
        assert!(lab.validity.iter().all(|&v| !v));
    }

    #[test]
    fn lab_anchors() {
        let white = srgb_to_lab([255.0; 3]);
        assert!((white[0] - 100.0).abs() < 1e-3);
        assert!(white[1].abs() < 0.5 && white[2].abs() < 0.5);
        let black = srgb_to_lab([0.0; 3]);
        assert!(black.iter().all(|v| v.abs() < 1e-12));
        let mid = srgb_to_lab([118.0; 3]);
        assert!((mid[0] - 50.0).abs() <= 1.0, "{mid:?}");
    }

    #[test]
    fn lab_round_trip() {
        for rgb in [[12.0, 200.0, 90.0], [0.0, 174.0, 239.0], [236.0, 0.0, 140.0]] {
            let back = lab_to_srgb(srgb_to_lab(rgb));
            for c in 0..3 {
                assert!((back[c] - rgb[c]).abs() < 1e-3, "{rgb:?} -> {back:?}");
            }
        }
    }

    #[test]
    fn neutral_grays_have_no_chroma() {
        let r = SrgbRaster::new(
            256,
            1,
            (0..=255u8).map(|v| [v, v, v]).collect(),
            vec![true; 256],
            600,
        )
        .unwrap();
        let lab = to_lab(&r);
        for i in 0..256 {
            assert!(lab.a[i].abs() < 0.5 && lab.b[i].abs() < 0.5);
            assert!((0.0..=100.0).contains(&lab.l[i]));
        }
    }

    #[test]
    fn rejects_mismatched_planes() {
        assert!(SrgbRaster::new(2, 2, vec![[0; 3]; 3], vec![true; 4], 600).is_err());
        assert!(SrgbRaster::new(2, 2, vec![[0; 3]; 4], vec![true; 4], 0).is_err());
    }
}
