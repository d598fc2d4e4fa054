//! Blockwise dataset files and ground-truth labelling.
//!
//! Each row carries three groups of fields: page-level (file, block index,
//! tint color), block-level (extent, mean color, DDE/MDL/DDL, label) and,
//! for blocks that passed candidate selection and segmentation, the defect
//! attributes. The header row doubles as the schema version: a file whose
//! header differs from [`DATASET_HEADER`] is rejected.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blockgrid::BlockId;
use crate::classifier::{FeatureVector7, Sample};
use crate::error::{Error, Result};
use crate::geom::BBox;
use crate::segmentation::Polarity;

pub const DATASET_HEADER: [&str; 19] = [
    "file", "block_idx", "color", "x0", "x1", "y0", "y1", "mean_l", "mean_a", "mean_b", "dde",
    "mdl", "ddl", "label", "polarity", "size_px", "major_px", "minor_px", "severity",
];

/// Minimum share of a truth region's area a block must cover to be
/// labelled defective.
pub const LABEL_MIN_OVERLAP: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefectFeatures {
    pub polarity: Polarity,
    pub size_px: usize,
    pub major_px: f64,
    pub minor_px: f64,
    pub severity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockRecord {
    pub file: String,
    pub block_id: BlockId,
    pub color: String,
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub mean_l: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    pub dde: f64,
    pub mdl: f64,
    pub ddl: f64,
    pub label: u8,
    /// Present only for candidate blocks with a segmented defect.
    pub defect: Option<DefectFeatures>,
}

impl BlockRecord {
    pub fn window(&self) -> BBox {
        BBox::new(self.x0, self.y0, self.x1, self.y1)
    }

    pub fn features(&self) -> Option<FeatureVector7> {
        self.defect.map(|d| FeatureVector7 {
            mdl: self.mdl,
            ddl: self.ddl,
            dde: self.dde,
            size_px: d.size_px as f64,
            major_axis_px: d.major_px,
            minor_axis_px: d.minor_px,
            severity: d.severity,
        })
    }

    pub fn sample(&self) -> Option<Sample> {
        self.features().map(|features| Sample {
            features,
            label: self.label,
        })
    }
}

/// Training samples: the records that carry defect features.
pub fn samples(records: &[BlockRecord]) -> Vec<Sample> {
    records.iter().filter_map(BlockRecord::sample).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    file: String,
    block_idx: String,
    color: String,
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    mean_l: f64,
    mean_a: f64,
    mean_b: f64,
    dde: f64,
    mdl: f64,
    ddl: f64,
    label: u8,
    polarity: Option<Polarity>,
    size_px: Option<usize>,
    major_px: Option<f64>,
    minor_px: Option<f64>,
    severity: Option<f64>,
}

impl From<&BlockRecord> for Row {
    fn from(r: &BlockRecord) -> Self {
        Row {
            file: r.file.clone(),
            block_idx: r.block_id.to_string(),
            color: r.color.clone(),
            x0: r.x0,
            x1: r.x1,
            y0: r.y0,
            y1: r.y1,
            mean_l: r.mean_l,
            mean_a: r.mean_a,
            mean_b: r.mean_b,
            dde: r.dde,
            mdl: r.mdl,
            ddl: r.ddl,
            label: r.label,
            polarity: r.defect.map(|d| d.polarity),
            size_px: r.defect.map(|d| d.size_px),
            major_px: r.defect.map(|d| d.major_px),
            minor_px: r.defect.map(|d| d.minor_px),
            severity: r.defect.map(|d| d.severity),
        }
    }
}

impl TryFrom<Row> for BlockRecord {
    type Error = String;

    fn try_from(row: Row) -> std::result::Result<Self, String> {
        if row.label > 1 {
            return Err(format!("label must be 0 or 1, got {}", row.label));
        }
        let defect = match (row.polarity, row.size_px, row.major_px, row.minor_px, row.severity) {
            (Some(polarity), Some(size_px), Some(major_px), Some(minor_px), Some(severity)) => {
                Some(DefectFeatures {
                    polarity,
                    size_px,
                    major_px,
                    minor_px,
                    severity,
                })
            }
            (None, None, None, None, None) => None,
            _ => return Err("defect fields must be all present or all empty".into()),
        };
        if row.x0 > row.x1 || row.y0 > row.y1 {
            return Err("block extent is inverted".into());
        }
        Ok(BlockRecord {
            file: row.file,
            block_id: row.block_idx.parse()?,
            color: row.color,
            x0: row.x0,
            x1: row.x1,
            y0: row.y0,
            y1: row.y1,
            mean_l: row.mean_l,
            mean_a: row.mean_a,
            mean_b: row.mean_b,
            dde: row.dde,
            mdl: row.mdl,
            ddl: row.ddl,
            label: row.label,
            defect,
        })
    }
}

pub fn write_records<W: Write>(records: &[BlockRecord], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(DATASET_HEADER)?;
    for r in records {
        w.serialize(Row::from(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(records: &[BlockRecord], path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_records(records, std::io::BufWriter::new(file))
}

/// Parses dataset CSV; `source` names the input in error messages.
pub fn read_records<R: Read>(reader: R, source: &Path) -> Result<Vec<BlockRecord>> {
    let err = |line: u64, message: String| Error::Dataset {
        path: source.to_path_buf(),
        line,
        message,
    };
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = r.headers().map_err(|e| err(1, e.to_string()))?.clone();
    if header.iter().ne(DATASET_HEADER.iter().copied()) {
        return Err(err(
            1,
            format!("unrecognized header, expected {}", DATASET_HEADER.join(",")),
        ));
    }
    let mut out = Vec::new();
    for result in r.deserialize::<Row>() {
        let row = result.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            err(line, e.to_string())
        })?;
        let line = out.len() as u64 + 2;
        out.push(BlockRecord::try_from(row).map_err(|m| err(line, m))?);
    }
    Ok(out)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<BlockRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    read_records(std::io::BufReader::new(file), path)
}

/// A ground-truth defect: an ellipse in page pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRegion {
    pub polarity: Polarity,
    pub center: [f64; 2],
    /// Semi-axis lengths in pixels, along the rotated x and y axes.
    pub semi_axes: [f64; 2],
    #[serde(default)]
    pub angle_deg: f64,
}

impl TruthRegion {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let u = (c * dx + s * dy) / self.semi_axes[0];
        let v = (-s * dx + c * dy) / self.semi_axes[1];
        u * u + v * v <= 1.0
    }

    /// Pixels whose centers fall inside the ellipse. A region too small to
    /// cover any pixel center is represented by the pixel holding its center.
    pub fn pixels(&self) -> Vec<(i64, i64)> {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let [a, b] = self.semi_axes;
        let hx = (a * a * c * c + b * b * s * s).sqrt();
        let hy = (a * a * s * s + b * b * c * c).sqrt();
        let (x0, x1) = ((self.center[0] - hx).floor() as i64, (self.center[0] + hx).ceil() as i64);
        let (y0, y1) = ((self.center[1] - hy).floor() as i64, (self.center[1] + hy).ceil() as i64);
        let mut out = Vec::new();
        for y in y0..=y1 {
            for x in x0..=x1 {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    out.push((x, y));
                }
            }
        }
        if out.is_empty() {
            out.push((self.center[0].floor() as i64, self.center[1].floor() as i64));
        }
        out
    }

    pub fn bbox(&self) -> BBox {
        let px = self.pixels();
        let clamp = |v: i64| v.max(0) as usize;
        BBox::new(
            clamp(px.iter().map(|p| p.0).min().unwrap()),
            clamp(px.iter().map(|p| p.1).min().unwrap()),
            clamp(px.iter().map(|p| p.0).max().unwrap() + 1),
            clamp(px.iter().map(|p| p.1).max().unwrap() + 1),
        )
    }
}

/// Fraction of the truth region's pixels that lie inside `window`.
pub fn overlap_fraction(window: &BBox, truth: &TruthRegion) -> f64 {
    let px = truth.pixels();
    let inside = px
        .iter()
        .filter(|&&(x, y)| {
            x >= window.x0 as i64 && x < window.x1 as i64 && y >= window.y0 as i64 && y < window.y1 as i64
        })
        .count();
    inside as f64 / px.len() as f64
}

/// 1 if the window covers at least [`LABEL_MIN_OVERLAP`] of any truth
/// region's area.
pub fn block_label(window: &BBox, truth: &[TruthRegion]) -> u8 {
    u8::from(
        truth
            .iter()
            .any(|t| overlap_fraction(window, t) >= LABEL_MIN_OVERLAP),
    )
}

/// Sets every record's label from the page's ground truth.
pub fn label_from_ground_truth(records: &mut [BlockRecord], truth: &[TruthRegion]) {
    for r in records.iter_mut() {
        r.label = block_label(&r.window(), truth);
    }
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<Vec<TruthRegion>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn write_truth(truth: &[TruthRegion], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(truth)? + "\n")?;
    Ok(())
}
