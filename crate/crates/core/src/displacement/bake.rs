use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DisplacementMap, RESOLUTIONS};
use crate::error::{Error, Result};
use crate::mesh::{loop_subdivide, sample_surface, Bvh, TriMesh, UvIndex};
use crate::scalar::Real;

/// Rays from the base surface search this far (mm) in both directions.
pub const BAKE_MAX_DISTANCE: f64 = 20.0;

const ERROR_SAMPLES: usize = 10_000;
const ERROR_SEED: u64 = 0x5eed_d15c;

/// Signed distance from `base` to `raw` along base normals at every UV pixel center.
///
/// Pixels outside the atlas, and rays that miss `raw`, are invalid. With
/// `smooth_raw` the scan is Laplacian-smoothed (3 steps of 0.5) first.
pub fn bake_displacement<T: Real>(
    base: &TriMesh<T>,
    raw: &TriMesh<T>,
    resolution: usize,
    smooth_raw: bool,
) -> Result<DisplacementMap<T>> {
    if !RESOLUTIONS.contains(&resolution) {
        return Err(Error::UnsupportedResolution(resolution));
    }
    let atlas = UvIndex::build(base)?;
    let smoothed;
    let target = if smooth_raw {
        smoothed = raw.laplacian_smooth(3, T::of(0.5));
        &smoothed
    } else {
        raw
    };
    let bvh = Bvh::build(target);
    let normals = base.vertex_normals();
    let max = T::of(BAKE_MAX_DISTANCE);
    let mut map = DisplacementMap::empty(resolution);

    let rows: Vec<Vec<Option<T>>> = (0..resolution)
        .into_par_iter()
        .map(|r| {
            (0..resolution)
                .map(|c| {
                    let (face, bary) = atlas.locate(map.pixel_uv(r, c))?;
                    let p = base.surface_point(face, bary, &normals);
                    bvh.raycast(&p.position, &p.normal, max).map(|h| h.distance)
                })
                .collect()
        })
        .collect();
    for (r, row) in rows.into_iter().enumerate() {
        for (c, v) in row.into_iter().enumerate() {
            map.set(r, c, v);
        }
    }
    Ok(map)
}

/// Loop-subdivides `base` and offsets every vertex along its normal by the sampled map value.
pub fn apply_displacement<T: Real>(
    base: &TriMesh<T>,
    dmap: &DisplacementMap<T>,
    subdiv_levels: usize,
) -> Result<TriMesh<T>> {
    if base.uvs().is_none() {
        return Err(Error::NoUvAtlas);
    }
    let fine = loop_subdivide(base, subdiv_levels);
    let normals = fine.vertex_normals();
    let uvs = fine.uvs().expect("subdivision keeps uvs");
    let moved = fine
        .vertices
        .par_iter()
        .zip(normals.par_iter())
        .zip(uvs.par_iter())
        .map(|((p, n), uv)| p + n * dmap.sample(*uv))
        .collect();
    Ok(fine.with_vertices(moved))
}

/// Binary size of a mesh stored with f32 positions (and f32 UVs when present)
/// and faces as a count byte plus three u32 indices.
pub fn mesh_storage_bytes<T: Real>(mesh: &TriMesh<T>) -> usize {
    let per_vertex = 12 + if mesh.uvs().is_some() { 8 } else { 0 };
    per_vertex * mesh.vertex_count() + 13 * mesh.face_count()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresentationError {
    pub mae: f64,
    pub p95: f64,
    /// `(base bytes + 16-bit map bytes) / raw bytes`
    pub size_ratio: f64,
}

/// How well `base` + `dmap` reproduces `raw`: distances from seeded uniform
/// samples of `raw` to the reconstructed surface, and the storage ratio.
pub fn representation_error<T: Real>(
    raw: &TriMesh<T>,
    base: &TriMesh<T>,
    dmap: &DisplacementMap<T>,
    subdiv_levels: usize,
) -> Result<RepresentationError> {
    let recon = apply_displacement(base, dmap, subdiv_levels)?;
    let bvh = Bvh::build(&recon);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(ERROR_SEED);
    let samples = sample_surface(raw, ERROR_SAMPLES, &mut rng);
    let mut dist: Vec<f64> = samples
        .par_iter()
        .map(|p| {
            bvh.closest_point(p)
                .map_or(f64::INFINITY, |c| c.distance_sq.f64().sqrt())
        })
        .collect();
    let mae = dist.iter().sum::<f64>() / dist.len().max(1) as f64;
    dist.sort_by(f64::total_cmp);
    let p95 = if dist.is_empty() {
        0.0
    } else {
        dist[((dist.len() as f64 * 0.95).ceil() as usize).clamp(1, dist.len()) - 1]
    };
    let stored = mesh_storage_bytes(base) + dmap.quantize().byte_size();
    Ok(RepresentationError {
        mae,
        p95,
        size_ratio: stored as f64 / mesh_storage_bytes(raw) as f64,
    })
}
