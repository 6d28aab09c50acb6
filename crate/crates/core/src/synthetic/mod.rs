//! Procedural face-like heads with known identity, expression and wrinkle
//! fields, and datasets built from them.
//!
//! Base shapes are `Σ_ab ẽ[a]·ĩ[b]·C_ab` over fixed vertex fields with
//! `ẽ = (1, expression amplitudes)` and `ĩ = (1, identity parameters)`, so a
//! population stacks into a tensor of multilinear rank at most
//! `(ID_DIMS + 1, EXP_DIMS + 1)` in (identity, expression).

mod cases;
mod dataset;
mod head;
mod subject;

pub use cases::{random_fit_state, render_fit_case, FitCase};
pub use dataset::{
    generate_population, load_albedo, save_albedo, PopulationConfig, PopulationManifest, SubjectFiles, TemplateFiles,
    DATASET_FORMAT, DATASET_VERSION, MANIFEST_FILE, SCHEMA_FILE,
};
pub use head::{AXES, COLLAR_WIDTH, EXP_DIMS, ID_DIMS, PHI_MAX_DEG, SUPERELLIPSOID_EXPONENT, THETA_MAX_DEG};
pub use subject::{
    base_meshes, default_expression, generate_subject, landmark_layout, stretch, subject_albedo, template_meshes,
    template_topology, wrinkled_scan, ResolutionTier, SyntheticSpec, SyntheticSubject, WrinkleField, WrinkleSpec,
    STRETCH_SATURATION,
};
