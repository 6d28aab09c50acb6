//! Two-layer face representation (base mesh + UV displacement map), bilinear
//! identity×expression face models, single-image model fitting, and
//! expression-dependent detail rigging.
//!
//! Geometry, map and shading code is generic over [`Real`] (`f32`/`f64`);
//! the aliases below fix the scalar to `f64`, which the solvers use.

pub mod displacement;
pub mod dynamic_detail;
pub mod error;
pub mod fitting;
pub mod linalg;
pub mod mesh;
pub mod morphable;
pub mod registration;
pub mod render;
pub mod scalar;
pub mod synthetic;
#[cfg(test)]
pub(crate) mod testkit;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Mesh = mesh::TriMesh<f64>;
pub type MeshF32 = mesh::TriMesh<f32>;
pub type SurfacePoint = mesh::SurfacePoint<f64>;
pub type DisplacementMap = displacement::DisplacementMap<f64>;
