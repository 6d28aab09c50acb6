//! Bringing raw scans into the shared template topology.

mod landmarks;
mod nicp;
mod pipeline;
mod procrustes;
mod transfer;

pub use landmarks::{LandmarkRecord, LandmarkSet};
pub use nicp::{mean_surface_distance, nicp_register, nicp_register_with_report, NicpConfig, NicpReport, NicpStage};
pub use pipeline::register_scan_set;
pub use procrustes::{procrustes_align, SimilarityTransform};
pub use transfer::{deformation_gradients, deformation_transfer};
