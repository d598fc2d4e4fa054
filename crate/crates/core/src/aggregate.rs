//! Page-level results: merge blockwise detections into physical defects,
//! summarize them as a page feature vector, and draw the annotated page.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::geom::BBox;
use crate::imaging::SrgbRaster;
use crate::segmentation::{DefectRegion, Polarity};

pub const MM_PER_INCH: f64 = 25.4;
pub const OVERLAY_STROKE_PX: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PageGeometry {
    pub width: usize,
    pub height: usize,
    pub dpi: u32,
}

impl PageGeometry {
    pub fn mm_per_px(&self) -> f64 {
        MM_PER_INCH / self.dpi as f64
    }

    /// Offset of a pixel-space point from the page center in mm, x right
    /// and y down.
    pub fn offset_mm(&self, x_px: f64, y_px: f64) -> [f64; 2] {
        let s = self.mm_per_px();
        [
            (x_px - self.width as f64 / 2.0) * s,
            (y_px - self.height as f64 / 2.0) * s,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageDefect {
    pub bbox: BBox,
    pub polarity: Polarity,
    pub size_px: usize,
    pub size_mm2: f64,
    pub severity: f64,
    /// Centroid in page pixel coordinates (pixel centers at +0.5).
    pub centroid_px: [f64; 2],
    /// Centroid offset from the page center in mm.
    pub centroid_mm: [f64; 2],
    /// Number of blockwise detections merged into this defect.
    pub members: usize,
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

/// Groups items whose boxes touch (overlap or share an edge or corner) and
/// whose polarities match, repeating on the grown group boxes until no two
/// same-polarity groups touch. Groups are returned as sorted member lists,
/// ordered by their smallest member.
pub fn touching_groups(items: &[(BBox, Polarity)]) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = (0..items.len()).map(|i| vec![i]).collect();
    loop {
        let boxes: Vec<(BBox, Polarity)> = groups
            .iter()
            .map(|g| {
                let b = g.iter().skip(1).fold(items[g[0]].0, |acc, &i| acc.union(&items[i].0));
                (b, items[g[0]].1)
            })
            .collect();
        let mut sets = DisjointSet::new(groups.len());
        let mut merged = false;
        for i in 0..groups.len() {
            for j in i + 1..groups.len() {
                if boxes[i].1 == boxes[j].1 && boxes[i].0.touches(&boxes[j].0) {
                    sets.union(i, j);
                    merged = true;
                }
            }
        }
        if !merged {
            break;
        }
        let mut next: Vec<Vec<usize>> = vec![Vec::new(); groups.len()];
        for (i, g) in groups.iter().enumerate() {
            next[sets.find(i)].extend(g);
        }
        groups = next.into_iter().filter(|g| !g.is_empty()).collect();
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    groups.sort();
    groups
}

fn canonical(mut defects: Vec<PageDefect>) -> Vec<PageDefect> {
    defects.sort_by(|a, b| {
        (a.polarity, a.bbox)
            .cmp(&(b.polarity, b.bbox))
            .then(a.size_px.cmp(&b.size_px))
    });
    defects
}

/// Merges blockwise detections into page defects. Detections whose boxes
/// touch and whose polarities agree form one defect with the union box,
/// the union of the member masks as its area and centroid, and the
/// area-weighted mean of member severities.
pub fn merge_detections(regions: &[DefectRegion], geometry: &PageGeometry) -> Vec<PageDefect> {
    let items: Vec<(BBox, Polarity)> = regions.iter().map(|r| (r.bbox, r.polarity)).collect();
    let s = geometry.mm_per_px();
    let defects = touching_groups(&items)
        .into_iter()
        .map(|group| {
            let mut pixels = BTreeSet::new();
            for &i in &group {
                pixels.extend(regions[i].page_pixels());
            }
            let mut members: Vec<&DefectRegion> = group.iter().map(|&i| &regions[i]).collect();
            members.sort_by_key(|r| (r.block_id, r.bbox, r.size_px));
            let weight: f64 = members.iter().map(|r| r.size_px as f64).sum();
            let severity = members.iter().map(|r| r.severity * r.size_px as f64).sum::<f64>() / weight;
            let n = pixels.len() as f64;
            let (sx, sy) = pixels
                .iter()
                .fold((0.0, 0.0), |(sx, sy), &(x, y)| (sx + x as f64 + 0.5, sy + y as f64 + 0.5));
            let centroid_px = [sx / n, sy / n];
            PageDefect {
                bbox: members.iter().skip(1).fold(members[0].bbox, |b, r| b.union(&r.bbox)),
                polarity: members[0].polarity,
                size_px: pixels.len(),
                size_mm2: pixels.len() as f64 * s * s,
                severity,
                centroid_px,
                centroid_mm: geometry.offset_mm(centroid_px[0], centroid_px[1]),
                members: members.len(),
            }
        })
        .collect();
    canonical(defects)
}

/// Merges page defects that touch. Areas add up (members are assumed
/// disjoint); severity and centroid are area-weighted.
pub fn merge_page_defects(defects: &[PageDefect], geometry: &PageGeometry) -> Vec<PageDefect> {
    let items: Vec<(BBox, Polarity)> = defects.iter().map(|d| (d.bbox, d.polarity)).collect();
    let s = geometry.mm_per_px();
    let merged = touching_groups(&items)
        .into_iter()
        .map(|group| {
            if group.len() == 1 {
                return defects[group[0]].clone();
            }
            let mut members: Vec<&PageDefect> = group.iter().map(|&i| &defects[i]).collect();
            members.sort_by_key(|d| (d.bbox, d.size_px));
            let size_px: usize = members.iter().map(|d| d.size_px).sum();
            let w = size_px as f64;
            let wmean = |f: &dyn Fn(&PageDefect) -> f64| members.iter().map(|d| f(d) * d.size_px as f64).sum::<f64>() / w;
            let centroid_px = [wmean(&|d| d.centroid_px[0]), wmean(&|d| d.centroid_px[1])];
            PageDefect {
                bbox: members.iter().skip(1).fold(members[0].bbox, |b, d| b.union(&d.bbox)),
                polarity: members[0].polarity,
                size_px,
                size_mm2: size_px as f64 * s * s,
                severity: wmean(&|d| d.severity),
                centroid_px,
                centroid_mm: geometry.offset_mm(centroid_px[0], centroid_px[1]),
                members: members.iter().map(|d| d.members).sum(),
            }
        })
        .collect();
    canonical(merged)
}

/// Summary of one page's defects. Statistics are `None` when the page has
/// no defects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageFeatureVector {
    pub n_defects: usize,
    pub n_gray: usize,
    pub n_solid: usize,
    pub size_mean: Option<f64>,
    pub size_max: Option<f64>,
    pub size_min: Option<f64>,
    pub size_std: Option<f64>,
    pub severity_mean: Option<f64>,
    pub severity_max: Option<f64>,
    pub severity_min: Option<f64>,
    pub centroid_mean_x_mm: Option<f64>,
    pub centroid_mean_y_mm: Option<f64>,
}

impl PageFeatureVector {
    pub const FIELDS: [&'static str; 12] = [
        "n_defects",
        "n_gray",
        "n_solid",
        "size_mean",
        "size_max",
        "size_min",
        "size_std",
        "severity_mean",
        "severity_max",
        "severity_min",
        "centroid_mean_x_mm",
        "centroid_mean_y_mm",
    ];

    /// Header line and value line; absent statistics are empty cells.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let values = [
            self.n_defects.to_string(),
            self.n_gray.to_string(),
            self.n_solid.to_string(),
            opt(self.size_mean),
            opt(self.size_max),
            opt(self.size_min),
            opt(self.size_std),
            opt(self.severity_mean),
            opt(self.severity_max),
            opt(self.severity_min),
            opt(self.centroid_mean_x_mm),
            opt(self.centroid_mean_y_mm),
        ];
        format!("{}\n{}\n", Self::FIELDS.join(","), values.join(","))
    }
}

fn stats(values: &[f64]) -> (Option<f64>, Option<f64>, Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None, None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    // Rounding can push the mean a hair outside [min, max].
    (Some(mean.clamp(min, max)), Some(max), Some(min), Some(var.sqrt()))
}

/// Counts, size statistics (mm², population standard deviation), severity
/// statistics and the mean centroid offset over the page's defects.
pub fn page_feature_vector(defects: &[PageDefect]) -> PageFeatureVector {
    let sizes: Vec<f64> = defects.iter().map(|d| d.size_mm2).collect();
    let sev: Vec<f64> = defects.iter().map(|d| d.severity).collect();
    let (size_mean, size_max, size_min, size_std) = stats(&sizes);
    let (severity_mean, severity_max, severity_min, _) = stats(&sev);
    let cx: Vec<f64> = defects.iter().map(|d| d.centroid_mm[0]).collect();
    let cy: Vec<f64> = defects.iter().map(|d| d.centroid_mm[1]).collect();
    let n_gray = defects.iter().filter(|d| d.polarity == Polarity::Light).count();
    PageFeatureVector {
        n_defects: defects.len(),
        n_gray,
        n_solid: defects.len() - n_gray,
        size_mean,
        size_max,
        size_min,
        size_std,
        severity_mean,
        severity_max,
        severity_min,
        centroid_mean_x_mm: stats(&cx).0,
        centroid_mean_y_mm: stats(&cy).0,
    }
}

/// The ring of pixels drawn around `bbox`: a stroke of `OVERLAY_STROKE_PX`
/// just outside the box, clipped to the page.
pub fn stroke_pixels(bbox: &BBox, width: usize, height: usize) -> Vec<(usize, usize)> {
    let s = OVERLAY_STROKE_PX;
    let ox0 = bbox.x0.saturating_sub(s);
    let oy0 = bbox.y0.saturating_sub(s);
    let ox1 = (bbox.x1 + s).min(width);
    let oy1 = (bbox.y1 + s).min(height);
    let mut out = Vec::new();
    for y in oy0..oy1 {
        for x in ox0..ox1 {
            let inside = x >= bbox.x0 && x < bbox.x1 && y >= bbox.y0 && y < bbox.y1;
            if !inside {
                out.push((x, y));
            }
        }
    }
    out
}

/// Draws a white box around each gray spot and a black box around each
/// solid spot on a copy of `page`.
pub fn render_overlay(page: &SrgbRaster, defects: &[PageDefect]) -> SrgbRaster {
    let mut out = page.clone();
    let (w, h) = (page.width(), page.height());
    for d in defects {
        let color = match d.polarity {
            Polarity::Light => [255, 255, 255],
            Polarity::Dark => [0, 0, 0],
        };
        for (x, y) in stroke_pixels(&d.bbox, w, h) {
            out.pixels_mut()[y * w + x] = color;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockgrid::{BlockId, GridPass};

    fn geometry() -> PageGeometry {
        PageGeometry {
            width: 1000,
            height: 800,
            dpi: 600,
        }
    }

    fn region(x0: usize, y0: usize, w: usize, h: usize, polarity: Polarity, severity: f64) -> DefectRegion {
        // Mask fills the box exactly; the block is the box itself.
        DefectRegion {
            block_id: BlockId::new(GridPass::Initial, y0 as u32, x0 as u32),
            origin: (x0, y0),
            block_width: w,
            block_height: h,
            mask: vec![true; w * h],
            size_px: w * h,
            polarity,
            major_axis_px: w.max(h) as f64,
            minor_axis_px: w.min(h) as f64,
            severity,
            bbox: BBox::new(x0, y0, x0 + w, y0 + h),
        }
    }

    #[test]
    fn double_detection_merges_to_one() {
        let a = region(100, 100, 20, 20, Polarity::Light, 0.2);
        let b = region(110, 110, 20, 20, Polarity::Light, 0.4);
        let d = merge_detections(&[a, b], &geometry());
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].bbox, BBox::new(100, 100, 130, 130));
        assert_eq!(d[0].size_px, 400 + 400 - 100);
        assert!((d[0].severity - 0.3).abs() < 1e-12);
        assert_eq!(d[0].members, 2);
    }

    #[test]
    fn opposite_polarities_stay_apart() {
        let a = region(100, 100, 20, 20, Polarity::Light, 0.2);
        let b = region(110, 110, 20, 20, Polarity::Dark, 0.4);
        assert_eq!(merge_detections(&[a, b], &geometry()).len(), 2);
    }

    #[test]
    fn chain_merges_into_union_box() {
        let a = region(0, 0, 10, 10, Polarity::Dark, 0.1);
        let b = region(10, 5, 10, 10, Polarity::Dark, 0.1);
        let c = region(20, 12, 10, 10, Polarity::Dark, 0.1);
        let far = region(200, 200, 10, 10, Polarity::Dark, 0.1);
        let d = merge_detections(&[c, far, a, b], &geometry());
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].bbox, BBox::new(0, 0, 30, 22));
    }

    #[test]
    fn grown_boxes_keep_merging() {
        // a and b merge; their union box then touches c although neither
        // member box does.
        let a = region(0, 0, 5, 5, Polarity::Light, 0.1);
        let b = region(5, 5, 5, 5, Polarity::Light, 0.1);
        let c = region(8, 0, 3, 3, Polarity::Light, 0.1);
        assert!(!a.bbox.touches(&c.bbox) && !b.bbox.touches(&c.bbox));
        let d = merge_detections(&[a, b, c], &geometry());
        assert_eq!(d.len(), 1);
    }

    #[test]
    fn single_defect_statistics() {
        let d = PageDefect {
            bbox: BBox::new(0, 0, 10, 10),
            polarity: Polarity::Light,
            size_px: 100,
            size_mm2: 100.0 * (25.4f64 / 600.0).powi(2),
            severity: 0.16,
            centroid_px: [5.0, 5.0],
            centroid_mm: [0.0, 0.0],
            members: 1,
        };
        let v = page_feature_vector(&[d]);
        assert_eq!((v.n_defects, v.n_gray, v.n_solid), (1, 1, 0));
        assert!((v.size_mean.unwrap() - 0.179).abs() < 0.001);
        assert_eq!(v.size_std, Some(0.0));
        assert_eq!(v.size_min, v.size_mean);
        assert_eq!(v.size_max, v.size_mean);
    }

    #[test]
    fn empty_page_vector() {
        let v = page_feature_vector(&[]);
        assert_eq!(v.n_defects, 0);
        assert!(v.size_mean.is_none() && v.centroid_mean_x_mm.is_none());
        let json = serde_json::to_value(&v).unwrap();
        assert!(json["size_mean"].is_null());
        for f in PageFeatureVector::FIELDS {
            assert!(json.get(f).is_some(), "{f}");
        }
        assert!(v.to_csv().ends_with("0,0,0,,,,,,,,,\n"));
    }

    #[test]
    fn offsets_from_page_center() {
        let g = geometry();
        assert_eq!(g.offset_mm(500.0, 400.0), [0.0, 0.0]);
        let o = g.offset_mm(600.0, 300.0);
        assert!((o[0] - 100.0 * 25.4 / 600.0).abs() < 1e-12);
        assert!(o[1] < 0.0);
    }

    #[test]
    fn overlay_draws_colored_rings() {
        let page = SrgbRaster::filled(100, 80, [120, 120, 120], 600).unwrap();
        assert_eq!(render_overlay(&page, &[]), page);
        let mk = |bbox, polarity| PageDefect {
            bbox,
            polarity,
            size_px: 1,
            size_mm2: 0.0,
            severity: 0.0,
            centroid_px: [0.0; 2],
            centroid_mm: [0.0; 2],
            members: 1,
        };
        let defects = [
            mk(BBox::new(10, 10, 20, 20), Polarity::Light),
            mk(BBox::new(50, 40, 60, 52), Polarity::Dark),
        ];
        let out = render_overlay(&page, &defects);
        assert_eq!(out.pixel(8, 8), [255; 3]);
        assert_eq!(out.pixel(15, 15), [120; 3]);
        assert_eq!(out.pixel(61, 45), [0; 3]);
        let changed = (0..80 * 100).filter(|&i| out.pixels()[i] != page.pixels()[i]).count();
        assert_eq!(changed, (14 * 14 - 100) + (14 * 16 - 120));
    }
}
