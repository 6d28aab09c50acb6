//! Expression-dependent fine detail: activation masks from blendshape motion,
//! per-key weight masks, mask-weighted blending of key-expression displacement
//! maps, and the rig bundle consumed by interactive viewers.

mod blend;
mod bundle;
mod masks;

pub use blend::{
    blend_displacement, rig_detailed_mesh, ConstantProvider, DirectoryProvider, DisplacementProvider, MapSetProvider,
};
pub use bundle::{
    conformance_case, export_bundle, load_bundle, BufferFiles, BundleManifest, Conformance, ConformanceCase, MapFile,
    MaskFile, PixelProbe, RigBundle, VertexProbe, BUNDLE_FORMAT, BUNDLE_VERSION,
};
pub use masks::{
    compute_activation_masks, compute_weight_masks, ActivationMaskSet, MaskNormalization, WeightMaskSet,
    ACTIVATION_FLOOR,
};
