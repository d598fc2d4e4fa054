mod common;

use common::*;
use printdefect::aggregate::{merge_detections, merge_page_defects, PageGeometry};
use printdefect::blockgrid::{compute_metrics, BlockId, BlockMetrics, BlockWindow, GridPass};
use printdefect::candidates::{remove_baseline, select_candidates, CandidateConfig};
use printdefect::classifier::{train, CostMatrix, FeatureVector7, Sample, TreeConfig};
use printdefect::dataset::{read_records, write_records, BlockRecord, DefectFeatures};
use printdefect::imaging::{load_page, save_page, LabRaster, SrgbRaster};
use printdefect::segmentation::{
    defect_attributes, otsu_threshold, valley_emphasis_threshold, DefectRegion, Histogram,
};
use printdefect::{BBox, Polarity};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn full_window(r: &LabRaster) -> BlockWindow {
    BlockWindow {
        id: BlockId::new(GridPass::Initial, 0, 0),
        x0: 0,
        x1: r.width,
        y0: 0,
        y1: r.height,
        valid_count: r.validity.iter().filter(|&&v| v).count(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn block_metrics_are_consistent(seed in any::<u64>(), w in 2usize..40, h in 2usize..40, masked in 0.0f64..0.6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = random_lab(&mut rng, w, h, masked);
        let win = full_window(&r);
        match (compute_metrics(&r, &win), two_pass_metrics(&r, &win)) {
            (Some(m), Some(want)) => {
                let got = metrics_array(&m);
                for k in 0..7 {
                    prop_assert!(rel_err(got[k], want[k]) <= 1e-9);
                }
                prop_assert!(m.dde >= 0.0 && m.ddl >= 0.0);
                // |ΔL| never exceeds ΔE.
                prop_assert!(m.mdl <= m.mde + 1e-9);
                prop_assert_eq!(m.valid_count, win.valid_count);
            }
            (None, None) => prop_assert!(win.valid_count < 2),
            (a, b) => prop_assert!(false, "{:?} vs {:?}", a, b),
        }
    }

    #[test]
    fn block_metrics_ignore_color_shift_and_transpose(seed in any::<u64>(), w in 2usize..30, h in 2usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = random_lab(&mut rng, w, h, 0.2);
        let Some(base) = compute_metrics(&r, &full_window(&r)) else { return Ok(()); };

        let mut shifted = r.clone();
        shifted.a.iter_mut().for_each(|v| *v += 4.0);
        shifted.b.iter_mut().for_each(|v| *v -= 2.0);
        let s = compute_metrics(&shifted, &full_window(&shifted)).unwrap();

        let mut t = LabRaster::uniform(h, w, [0.0; 3], r.dpi);
        for y in 0..h {
            for x in 0..w {
                let (i, j) = (y * w + x, x * h + y);
                t.l[j] = r.l[i];
                t.a[j] = r.a[i];
                t.b[j] = r.b[i];
                t.validity[j] = r.validity[i];
            }
        }
        let tm = compute_metrics(&t, &full_window(&t)).unwrap();
        for (k, (a, (b, c))) in [base.mde, base.dde, base.mdl, base.ddl]
            .iter()
            .zip([s.mde, s.dde, s.mdl, s.ddl].iter().zip([tm.mde, tm.dde, tm.mdl, tm.ddl].iter()))
            .enumerate()
        {
            prop_assert!((a - b).abs() <= 1e-3, "shift field {}: {} vs {}", k, a, b);
            prop_assert!(rel_err(*c, *a) <= 1e-9, "transpose field {}: {} vs {}", k, a, c);
        }
    }

    #[test]
    fn thresholds_are_exhaustive_argmax(counts in prop::collection::vec(prop_oneof![Just(0u64), 0u64..500], 2..256)) {
        let h = Histogram::from_counts(counts.clone(), (0.0, 1.0));
        let otsu = otsu_threshold(&h).ok();
        let valley = valley_emphasis_threshold(&h).ok();
        prop_assert_eq!(otsu, exhaustive_threshold(&counts, Objective::Otsu));
        prop_assert_eq!(valley, exhaustive_threshold(&counts, Objective::Valley));
        if let (Some(o), Some(v)) = (otsu, valley) {
            // Weighting by (1 - p) can only move the threshold to a sparser level.
            prop_assert!(counts[v] <= counts[o]);
        }
    }
}

fn box_region(id: u32, x0: usize, y0: usize, w: usize, h: usize, polarity: Polarity, severity: f64) -> DefectRegion {
    DefectRegion {
        block_id: BlockId::new(GridPass::Initial, id / 64, id % 64),
        origin: (x0, y0),
        block_width: w,
        block_height: h,
        mask: vec![true; w * h],
        size_px: w * h,
        polarity,
        major_axis_px: w as f64,
        minor_axis_px: h as f64,
        severity,
        bbox: BBox::new(x0, y0, x0 + w, y0 + h),
    }
}

fn arb_regions() -> impl Strategy<Value = Vec<DefectRegion>> {
    prop::collection::vec((0usize..120, 0usize..120, 1usize..20, 1usize..20, any::<bool>(), 0.1f64..5.0), 1..25)
        .prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (x, y, w, h, light, s))| {
                    let p = if light { Polarity::Light } else { Polarity::Dark };
                    box_region(i as u32, x, y, w, h, p, s)
                })
                .collect()
        })
}

const GEOMETRY: PageGeometry = PageGeometry {
    width: 200,
    height: 200,
    dpi: 600,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn merging_is_order_invariant_and_idempotent(regions in arb_regions(), seed in any::<u64>()) {
        let merged = merge_detections(&regions, &GEOMETRY);
        let mut shuffled = regions.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(&merge_detections(&shuffled, &GEOMETRY), &merged);
        prop_assert_eq!(&merge_page_defects(&merged, &GEOMETRY), &merged);

        for (i, a) in merged.iter().enumerate() {
            for b in &merged[i + 1..] {
                prop_assert!(a.polarity != b.polarity || !a.bbox.touches(&b.bbox));
            }
        }
        let mut union = std::collections::BTreeSet::new();
        for r in &regions {
            union.extend(r.page_pixels().map(|p| (p, r.polarity)));
        }
        prop_assert_eq!(merged.iter().map(|d| d.size_px).sum::<usize>(), union.len());
        prop_assert_eq!(merged.iter().map(|d| d.members).sum::<usize>(), regions.len());
    }
}

fn arb_samples() -> impl Strategy<Value = Vec<Sample>> {
    prop::collection::vec((prop::array::uniform7(0u8..10), 0u8..2), 10..60).prop_map(|v| {
        v.into_iter()
            .map(|(f, label)| Sample {
                features: FeatureVector7::from_array(f.map(f64::from)),
                label,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn tree_ignores_sample_order_and_cost_scale(
        samples in arb_samples(),
        miss in 0.25f64..8.0,
        scale in 0.01f64..100.0,
        seed in any::<u64>(),
    ) {
        prop_assume!(samples.iter().any(|s| s.label == 0) && samples.iter().any(|s| s.label == 1));
        let config = TreeConfig::default();
        let cost = CostMatrix::with_miss_cost(miss).unwrap();
        let model = train(&samples, &cost, &config, "d").unwrap();

        let scaled = train(&samples, &cost.scaled(scale).unwrap(), &config, "d").unwrap();
        prop_assert_eq!(&scaled.nodes, &model.nodes);

        let mut shuffled = samples.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let permuted = train(&shuffled, &cost, &config, "d").unwrap();
        prop_assert_eq!(&permuted.nodes, &model.nodes);
        for s in &samples {
            prop_assert!(model.predict(&s.features) <= 1);
        }
    }
}

fn arb_record() -> impl Strategy<Value = BlockRecord> {
    (
        "[a-z0-9_.,]{1,12}",
        (any::<bool>(), 0u32..20, 0u32..20),
        any::<[u8; 3]>(),
        (0usize..2000, 1usize..76, 0usize..2000, 1usize..76),
        prop::array::uniform3(-100.0f64..100.0),
        prop::array::uniform3(0.0f64..30.0),
        0u8..2,
        prop::option::of((any::<bool>(), 1usize..5000, prop::array::uniform3(0.0f64..100.0))),
    )
        .prop_map(|(file, (shifted, row, col), rgb, (x0, w, y0, h), lab, stats, label, defect)| {
            let pass = if shifted { GridPass::Shifted } else { GridPass::Initial };
            BlockRecord {
                file,
                block_id: BlockId::new(pass, row, col),
                color: format!("#{:02x}{:02x}{:02x}", rgb[0], rgb[1], rgb[2]),
                x0,
                x1: x0 + w,
                y0,
                y1: y0 + h,
                mean_l: lab[0].abs(),
                mean_a: lab[1],
                mean_b: lab[2],
                dde: stats[0],
                mdl: stats[1],
                ddl: stats[2],
                label,
                defect: defect.map(|(light, size_px, [major, minor, severity])| DefectFeatures {
                    polarity: if light { Polarity::Light } else { Polarity::Dark },
                    size_px,
                    major_px: major,
                    minor_px: minor,
                    severity,
                }),
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dataset_round_trips(records in prop::collection::vec(arb_record(), 0..20)) {
        let mut buf = Vec::new();
        write_records(&records, &mut buf).unwrap();
        let back = read_records(buf.as_slice(), std::path::Path::new("mem.csv")).unwrap();
        prop_assert_eq!(back, records);
    }

    #[test]
    fn page_round_trips_through_png(seed in any::<u64>(), w in 1usize..40, h in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels: Vec<[u8; 3]> = (0..w * h).map(|_| rng.random()).collect();
        let valid: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.8)).collect();
        let page = SrgbRaster::new(w, h, pixels, valid, 600).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        save_page(&page, &path).unwrap();
        prop_assert_eq!(load_page(&path).unwrap(), page);
    }
}

/// Block metrics for a row of blocks with one color and the given DDEs.
fn metric_row(ddes: &[f64]) -> Vec<BlockMetrics> {
    ddes.iter()
        .enumerate()
        .map(|(i, &dde)| BlockMetrics {
            id: BlockId::new(GridPass::Initial, 0, i as u32),
            x0: 75 * i,
            x1: 75 * (i + 1),
            y0: 0,
            y1: 75,
            mean_l: 50.0,
            mean_a: 0.0,
            mean_b: 0.0,
            mde: dde,
            dde,
            mdl: dde,
            ddl: dde,
            valid_count: 5625,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn raising_the_threshold_only_drops_candidates(
        ddes in prop::collection::vec(0.0f64..5.0, 1..80),
        t1 in 0.0f64..3.0,
        dt in 0.0f64..3.0,
    ) {
        let points = remove_baseline(&metric_row(&ddes), &CandidateConfig::default());
        let low = select_candidates(&points, t1);
        let high = select_candidates(&points, t1 + dt);
        prop_assert!(high.block_ids.is_subset(&low.block_ids));
        for p in &points {
            prop_assert!(p.corrected >= 0.0);
        }
    }

    #[test]
    fn uniform_dde_offset_leaves_corrections_unchanged(
        ddes in prop::collection::vec(0.0f64..5.0, 1..80),
        offset in 0.0f64..10.0,
    ) {
        let config = CandidateConfig::default();
        let base = remove_baseline(&metric_row(&ddes), &config);
        let lifted: Vec<f64> = ddes.iter().map(|d| d + offset).collect();
        let moved = remove_baseline(&metric_row(&lifted), &config);
        for (a, b) in base.iter().zip(&moved) {
            prop_assert_eq!(a.id, b.id);
            prop_assert!((a.corrected - b.corrected).abs() <= 1e-9);
            prop_assert!((b.baseline - a.baseline - offset).abs() <= 1e-9);
        }
    }
}

/// A 60×60 block holding a blob made of up to three rectangles.
fn blob_block(rects: &[(usize, usize, usize, usize)], dl: f32, dx: usize, dy: usize) -> (LabRaster, Vec<bool>) {
    let n = 60;
    let mut lab = LabRaster::uniform(n, n, [55.0, 5.0, 5.0], 600);
    let mut mask = vec![false; n * n];
    for &(x, y, w, h) in rects {
        for yy in y..y + h {
            for xx in x..x + w {
                let i = (yy + dy) * n + xx + dx;
                mask[i] = true;
                lab.l[i] = 55.0 + dl;
            }
        }
    }
    (lab, mask)
}

fn rotate(lab: &LabRaster, mask: &[bool]) -> (LabRaster, Vec<bool>) {
    let n = lab.width;
    let mut out = lab.clone();
    let mut m = vec![false; mask.len()];
    for y in 0..n {
        for x in 0..n {
            let (i, j) = (y * n + x, x * n + (n - 1 - y));
            out.l[j] = lab.l[i];
            out.a[j] = lab.a[i];
            out.b[j] = lab.b[i];
            m[j] = mask[i];
        }
    }
    (out, m)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attributes_survive_translation_and_rotation(
        rects in prop::collection::vec((0usize..20, 0usize..20, 1usize..15, 1usize..15), 1..4),
        dl in prop_oneof![-12.0f32..-2.0, 2.0f32..12.0],
        dx in 0usize..20,
        dy in 0usize..20,
    ) {
        let attrs = |lab: &LabRaster, mask: &[bool]| {
            let (block, means) = block_of(lab);
            defect_attributes(mask, &block, means).unwrap()
        };
        let (lab, mask) = blob_block(&rects, dl, 0, 0);
        let base = attrs(&lab, &mask);
        let (moved_lab, moved_mask) = blob_block(&rects, dl, dx, dy);
        let (rot_lab, rot_mask) = rotate(&lab, &mask);
        for other in [attrs(&moved_lab, &moved_mask), attrs(&rot_lab, &rot_mask)] {
            prop_assert_eq!(other.size_px, base.size_px);
            prop_assert_eq!(other.polarity, base.polarity);
            prop_assert!((other.major_axis_px - base.major_axis_px).abs() <= 1e-6);
            prop_assert!((other.minor_axis_px - base.minor_axis_px).abs() <= 1e-6);
            prop_assert!(rel_err(other.severity, base.severity) <= 1e-6);
        }
        let expected = if dl > 0.0 { Polarity::Light } else { Polarity::Dark };
        prop_assert_eq!(base.polarity, expected);
    }
}
