//! Detection and characterization of local print defects (gray spots and
//! solid spots) on scanned pages.
//!
//! A page is descreened, converted to CIELAB and cut into two offset block
//! grids. Blocks whose color spread stands out from a running baseline are
//! segmented, and each segmented spot is described by its size, shape,
//! polarity and severity. A cost-sensitive decision tree can then prune
//! false alarms before detections are merged into page-level defects.

pub mod aggregate;
pub mod blockgrid;
pub mod candidates;
pub mod classifier;
pub mod dataset;
pub mod error;
pub mod geom;
pub mod imaging;
pub mod pipeline;
pub mod segmentation;
pub mod synthpage;

pub use error::{Error, Result};
pub use geom::BBox;
pub use segmentation::Polarity;
