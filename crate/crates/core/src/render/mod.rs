//! Software rasterization with spherical-harmonic Lambertian shading,
//! and image re-synthesis at a new expression.

mod camera;
mod image;
mod raster;
mod resynth;
mod sh;

pub use camera::{project, CameraPose};
pub use image::{psnr, LinearImage};
pub use raster::{
    rasterize, rasterize_coverage, shade_sample, vertex_visibility, Coverage, RenderOutput, MAX_RESOLUTION, NO_FACE,
};
pub use resynth::{detail_normal, resynthesize_expression, SHADING_FLOOR};
pub use sh::{sh_basis, sh_basis_gradient, sh_irradiance, sh_shade, sh_shade_jacobian, Sh9, BAND_WEIGHTS};
