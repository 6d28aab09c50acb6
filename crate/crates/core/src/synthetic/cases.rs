use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fitting::{AlbedoModel, FitState};
use crate::morphable::BilinearModel;
use crate::registration::LandmarkSet;
use crate::render::{rasterize, CameraPose, LinearImage, Sh9};
use crate::Mesh;

/// A face rendered from known parameters, for fitting.
#[derive(Clone, Debug)]
pub struct FitCase {
    pub state: FitState,
    pub image: LinearImage,
    /// `layout` with exact 2D projections of the truth mesh.
    pub landmarks: LandmarkSet,
    pub mesh: Mesh,
}

fn mix_rows(n: usize, row: impl Fn(usize) -> Vec<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
    let s: f64 = rng.random_range(0.0..1.0);
    row(i).iter().zip(row(j)).map(|(a, b)| s * a + (1.0 - s) * b).collect()
}

/// Shape and expression on segments between training rows, albedo within one
/// standard deviation, yaw within ±25°, and a frontal-ish directional light.
pub fn random_fit_state(m: &BilinearModel, albedo: &AlbedoModel, seed: u64, image_size: usize) -> FitState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_id = mix_rows(m.identities(), |i| m.id_row(i).as_slice().to_vec(), &mut rng);
    let w_exp = mix_rows(m.expressions(), |e| m.exp_row(e).as_slice().to_vec(), &mut rng);
    let w_alb = albedo.stddev.iter().map(|s| s * rng.random_range(-1.0..1.0)).collect();
    let omega = Vector3::new(
        rng.random_range(-10f64..10.0).to_radians(),
        rng.random_range(-25f64..25.0).to_radians(),
        rng.random_range(-5f64..5.0).to_radians(),
    );
    let size = image_size as f64;
    let scale = size / 240.0 * rng.random_range(0.9..1.1);
    let t = Vector2::new(size / 2.0, size / 2.0)
        + Vector2::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)) * (size / 256.0);
    let dir = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.3..0.5), 1.0);
    FitState {
        pose: CameraPose::frontal(scale, t).rotated(&omega),
        w_id,
        w_exp,
        w_alb,
        sh: Sh9::directional(&dir, Vector3::new(0.75, 0.7, 0.65), 0.35),
    }
}

/// Renders `state` into a square image and projects the landmark layout.
pub fn render_fit_case(
    m: &BilinearModel,
    albedo: &AlbedoModel,
    layout: &LandmarkSet,
    state: FitState,
    image_size: usize,
) -> Result<FitCase> {
    let mesh = m.synthesize_mesh(&state.w_id, &state.w_exp)?;
    let colors = albedo.albedo(&state.w_alb)?;
    let image = rasterize(&mesh, &colors, &state.pose, &state.sh, image_size, image_size)?.color;
    let points = layout
        .template_vertex_ids
        .iter()
        .map(|&v| state.pose.project(&mesh.vertices[v as usize]))
        .collect();
    Ok(FitCase {
        landmarks: layout.with_points2d(points),
        state,
        image,
        mesh,
    })
}
