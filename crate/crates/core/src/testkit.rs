//! Small models shared by unit tests.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fitting::{AlbedoModel, FitState};
use crate::mesh::fixtures;
use crate::morphable::{assemble_tensor, tucker_decompose, BilinearModel, TuckerMethod};
use crate::registration::LandmarkSet;
use crate::render::{rasterize, CameraPose, LinearImage, Sh9};
use crate::Mesh;

pub const IMAGE_SIZE: usize = 128;

/// Bilinear model over a 12×12 sphere patch (radius 40) from 6 identities × 4 expressions.
pub fn patch_model() -> BilinearModel {
    let base = fixtures::sphere_patch(40.0, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let uvs = base.uvs().unwrap().to_vec();
    let id_coef: Vec<[f64; 3]> = (0..6)
        .map(|_| {
            [
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
                rng.random_range(-3.0..3.0),
            ]
        })
        .collect();
    let exp_amp = [0.0, 3.0, -2.5, 2.0];
    let grid: Vec<Vec<Mesh>> = (0..6)
        .map(|i| {
            let [a, b, c] = id_coef[i];
            (0..4)
                .map(|e| {
                    let k = exp_amp[e] * (1.0 + 0.15 * a);
                    let verts = base
                        .vertices
                        .iter()
                        .zip(&uvs)
                        .map(|(p, uv)| {
                            let (u, v) = (uv.x - 0.5, uv.y - 0.5);
                            let n = p / 40.0;
                            let bump = (-(u * u + v * v) / 0.03).exp();
                            let collar = (1.0 - 4.0 * u * u) * (1.0 - 4.0 * v * v);
                            let id = Vector3::new(a * u, b * v, 0.0) + n * (c * bump);
                            let exp =
                                Vector3::new(0.0, -k * collar * (v + 0.5) * (e % 2) as f64, k * collar * u * u * 4.0);
                            p + id + exp
                        })
                        .collect();
                    base.with_vertices(verts)
                })
                .collect()
        })
        .collect();
    let t = assemble_tensor(&grid, true).unwrap();
    tucker_decompose(&t, 6, 4, TuckerMethod::Hosvd).unwrap()
}

pub fn patch_albedo(m: &BilinearModel) -> AlbedoModel {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let uvs = m.template.uvs().unwrap();
    let samples: Vec<Vec<f64>> = (0..8)
        .map(|_| {
            let (f, g, base): (f64, f64, f64) = (
                rng.random_range(1.0..4.0),
                rng.random_range(1.0..4.0),
                rng.random_range(0.4..0.6),
            );
            uvs.iter()
                .flat_map(|uv| {
                    let w = (f * uv.x).sin() * (g * uv.y).cos();
                    [base + 0.1 * w, base * 0.8 + 0.05 * w, base * 0.7 - 0.05 * w]
                })
                .collect()
        })
        .collect();
    AlbedoModel::from_samples(&samples, 4).unwrap()
}

/// Landmark vertices of the patch; those on the left and right borders are contour landmarks.
pub fn landmark_vertices() -> (Vec<u32>, Vec<bool>) {
    let ids: Vec<u32> = [24, 29, 35, 50, 53, 57, 60, 65, 71, 89, 92, 100, 103, 113].to_vec();
    let contour = ids.iter().map(|&v| v % 12 == 0 || v % 12 == 11).collect();
    (ids, contour)
}

pub fn random_state(m: &BilinearModel, alb: &AlbedoModel, seed: u64) -> FitState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = Vector3::new(
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.4..0.4),
        rng.random_range(-0.1..0.1),
    );
    let mix = |n: usize, rows: &dyn Fn(usize) -> Vec<f64>, rng: &mut ChaCha8Rng| {
        let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
        let s: f64 = rng.random_range(0.2..0.8);
        rows(i)
            .iter()
            .zip(rows(j))
            .map(|(a, b)| s * a + (1.0 - s) * b)
            .collect::<Vec<f64>>()
    };
    let w_id = mix(m.identities(), &|i| m.id_row(i).as_slice().to_vec(), &mut rng);
    let w_exp = mix(m.expressions(), &|e| m.exp_row(e).as_slice().to_vec(), &mut rng);
    let w_alb = alb.stddev.iter().map(|s| s * rng.random_range(-1.0..1.0)).collect();
    let dir = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 1.0);
    FitState {
        pose: CameraPose::frontal(rng.random_range(1.0..1.3), Vector2::new(64.0, 64.0)).rotated(&omega),
        w_id,
        w_exp,
        w_alb,
        sh: Sh9::directional(&dir, Vector3::new(0.7, 0.65, 0.6), 0.35),
    }
}

pub fn render_state(m: &BilinearModel, alb: &AlbedoModel, st: &FitState) -> LinearImage {
    let mesh = m.synthesize_mesh(&st.w_id, &st.w_exp).unwrap();
    let albedo = alb.albedo(&st.w_alb).unwrap();
    rasterize(&mesh, &albedo, &st.pose, &st.sh, IMAGE_SIZE, IMAGE_SIZE)
        .unwrap()
        .color
}

pub fn projected_landmarks(m: &BilinearModel, st: &FitState) -> LandmarkSet {
    let mesh = m.synthesize_mesh(&st.w_id, &st.w_exp).unwrap();
    let (ids, contour) = landmark_vertices();
    LandmarkSet {
        points2d: Some(
            ids.iter()
                .map(|&v| st.pose.project(&mesh.vertices[v as usize]))
                .collect(),
        ),
        points3d: None,
        semantic_ids: (0..ids.len() as u32).collect(),
        template_vertex_ids: ids,
        contour,
    }
}
