//! One page, end to end: descreen, block metrics, candidate selection,
//! segmentation, optional tree refinement, merging.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{merge_detections, page_feature_vector, PageDefect, PageFeatureVector, PageGeometry};
use crate::blockgrid::{dual_pass_metrics, BlockId, BlockMetrics, BlockPixels, GridConfig};
use crate::candidates::{remove_baseline, select_candidates, BaselinePoint, CandidateConfig, CandidateSet};
use crate::classifier::TreeModel;
use crate::dataset::{label_from_ground_truth, BlockRecord, DefectFeatures, TruthRegion};
use crate::imaging::{descreen, lab_to_srgb, to_lab, SrgbRaster};
use crate::segmentation::{characterize_block, DefectRegion, Rejection, SegmentConfig};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub grid: GridConfig,
    pub candidate: CandidateConfig,
    pub segment: SegmentConfig,
}

#[derive(Debug, Clone)]
pub struct PageAnalysis {
    pub geometry: PageGeometry,
    pub metrics: Vec<BlockMetrics>,
    pub baseline: Vec<BaselinePoint>,
    pub candidates: CandidateSet,
    /// Segmented candidate blocks, in block order.
    pub regions: Vec<DefectRegion>,
    /// Candidates that produced no usable defect.
    pub rejected: Vec<(BlockId, Rejection)>,
    /// Regions kept by the tree (all regions when no model is given).
    pub accepted: Vec<DefectRegion>,
    pub defects: Vec<PageDefect>,
    pub features: PageFeatureVector,
    pub records: Vec<BlockRecord>,
}

fn hex_color(lab: [f64; 3]) -> String {
    let rgb = lab_to_srgb(lab).map(|c| c.round().clamp(0.0, 255.0) as u8);
    format!("#{:02x}{:02x}{:02x}", rgb[0], rgb[1], rgb[2])
}

/// Mean color of each tint region, as hex sRGB, keyed by region index.
fn region_colors(metrics: &[BlockMetrics], points: &[BaselinePoint]) -> BTreeMap<usize, String> {
    let mut sums: BTreeMap<usize, ([f64; 3], f64)> = BTreeMap::new();
    for (m, p) in metrics.iter().zip(points) {
        let e = sums.entry(p.region).or_insert(([0.0; 3], 0.0));
        let w = m.valid_count as f64;
        for (s, v) in e.0.iter_mut().zip(m.means()) {
            *s += v * w;
        }
        e.1 += w;
    }
    sums.into_iter()
        .map(|(r, (s, w))| (r, hex_color(s.map(|v| v / w))))
        .collect()
}

pub fn analyze_page(
    page: &SrgbRaster,
    config: &DetectConfig,
    model: Option<&TreeModel>,
    file: &str,
    truth: Option<&[TruthRegion]>,
) -> PageAnalysis {
    let lab = to_lab(&descreen(page));
    let metrics = dual_pass_metrics(&lab, &config.grid);
    let baseline = remove_baseline(&metrics, &config.candidate);
    let candidates = select_candidates(&baseline, config.candidate.threshold);

    let outcomes: Vec<(BlockId, Result<DefectRegion, Rejection>)> = metrics
        .par_iter()
        .filter(|m| candidates.contains(&m.id))
        .map(|m| {
            let block = BlockPixels::extract(&lab, &m.window());
            (m.id, characterize_block(&block, m.means(), &config.segment))
        })
        .collect();
    let mut regions = Vec::new();
    let mut rejected = Vec::new();
    for (id, outcome) in outcomes {
        match outcome {
            Ok(r) => regions.push(r),
            Err(e) => rejected.push((id, e)),
        }
    }

    let colors = region_colors(&metrics, &baseline);
    let by_block: BTreeMap<BlockId, &DefectRegion> = regions.iter().map(|r| (r.block_id, r)).collect();
    let mut records: Vec<BlockRecord> = metrics
        .iter()
        .zip(&baseline)
        .map(|(m, p)| BlockRecord {
            file: file.to_string(),
            block_id: m.id,
            color: colors[&p.region].clone(),
            x0: m.x0,
            x1: m.x1,
            y0: m.y0,
            y1: m.y1,
            mean_l: m.mean_l,
            mean_a: m.mean_a,
            mean_b: m.mean_b,
            dde: m.dde,
            mdl: m.mdl,
            ddl: m.ddl,
            label: 0,
            defect: by_block.get(&m.id).map(|r| DefectFeatures {
                polarity: r.polarity,
                size_px: r.size_px,
                major_px: r.major_axis_px,
                minor_px: r.minor_axis_px,
                severity: r.severity,
            }),
        })
        .collect();
    if let Some(truth) = truth {
        label_from_ground_truth(&mut records, truth);
    }

    let accepted: Vec<DefectRegion> = match model {
        None => regions.clone(),
        Some(tree) => {
            let keep: Vec<BlockId> = records
                .iter()
                .filter(|r| r.features().is_some_and(|f| tree.predict(&f) == 1))
                .map(|r| r.block_id)
                .collect();
            regions
                .iter()
                .filter(|r| keep.binary_search(&r.block_id).is_ok())
                .cloned()
                .collect()
        }
    };

    let geometry = PageGeometry {
        width: page.width(),
        height: page.height(),
        dpi: page.dpi(),
    };
    let defects = merge_detections(&accepted, &geometry);
    let features = page_feature_vector(&defects);
    PageAnalysis {
        geometry,
        metrics,
        baseline,
        candidates,
        regions,
        rejected,
        accepted,
        defects,
        features,
        records,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::srgb_to_lab;

    #[test]
    fn hex_colors() {
        assert_eq!(hex_color([100.0, 0.0, 0.0]), "#ffffff");
        assert_eq!(hex_color([0.0, 0.0, 0.0]), "#000000");
        let steel = srgb_to_lab([60.0, 150.0, 200.0]);
        assert_eq!(hex_color(steel), "#3c96c8");
    }

    #[test]
    fn config_from_partial_toml_like_json() {
        let c: DetectConfig = serde_json::from_str(r#"{"candidate":{"baseline_window":15}}"#).unwrap();
        assert_eq!(c.candidate.baseline_window, 15);
        assert_eq!(c.grid, GridConfig::default());
    }
}
