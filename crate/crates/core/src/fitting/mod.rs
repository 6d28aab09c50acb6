//! Single-image fitting of pose, shape, albedo and lighting against 2D
//! landmarks and a photometric term.

mod albedo;
mod energy;
mod solve;

pub use crate::render::{project, CameraPose};
pub use albedo::AlbedoModel;
pub use energy::{
    landmark_energy, pixel_energy, pixel_energy_fixed, regularization_energy, synthesize_samples, visible_samples,
    EnergyGradient, PixelSamples, PoseGradient,
};
pub use solve::{fit_image, init_pose, total_energy, EnergyTerms, FitConfig, FitResult, FitState};
