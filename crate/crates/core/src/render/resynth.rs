use nalgebra::{Matrix2, Vector2, Vector3};

use super::camera::CameraPose;
use super::image::LinearImage;
use super::raster::{rasterize_coverage, NO_FACE};
use super::sh::{sh_shade, Sh9};
use crate::error::{Error, Result};
use crate::fitting::FitResult;
use crate::mesh::normalize;
use crate::morphable::BilinearModel;
use crate::DisplacementMap;
use crate::Mesh;

/// Shading denominators are floored here.
pub const SHADING_FLOOR: f64 = 1e-3;

/// Normal of the base surface displaced by `dmap`, at a surface point.
///
/// The map's UV gradient is lifted to the surface through the face's UV
/// parametrization and subtracted from the interpolated normal; a flat map
/// leaves the interpolated normal unchanged.
pub fn detail_normal(
    mesh: &Mesh,
    normals: &[Vector3<f64>],
    face: usize,
    bary: [f64; 3],
    dmap: Option<&DisplacementMap>,
) -> Vector3<f64> {
    let idx = mesh.faces()[face].map(|i| i as usize);
    let n = normalize(&(normals[idx[0]] * bary[0] + normals[idx[1]] * bary[1] + normals[idx[2]] * bary[2]));
    let (Some(map), Some(uvs)) = (dmap, mesh.uvs()) else {
        return n;
    };
    let uv = uvs[idx[0]] * bary[0] + uvs[idx[1]] * bary[1] + uvs[idx[2]] * bary[2];
    let h = 1.0 / map.resolution() as f64;
    let du = (map.sample(uv + Vector2::new(h, 0.0)) - map.sample(uv - Vector2::new(h, 0.0))) / (2.0 * h);
    let dv = (map.sample(uv + Vector2::new(0.0, h)) - map.sample(uv - Vector2::new(0.0, h))) / (2.0 * h);
    if du == 0.0 && dv == 0.0 {
        return n;
    }
    let [x0, x1, x2] = idx.map(|i| mesh.vertices[i]);
    let (e1, e2) = (x1 - x0, x2 - x0);
    let (t1, t2) = (uvs[idx[1]] - uvs[idx[0]], uvs[idx[2]] - uvs[idx[0]]);
    let Some(inv) = Matrix2::new(t1.x, t2.x, t1.y, t2.y).try_inverse() else {
        return n;
    };
    // columns of [e1 e2]·inv are ∂X/∂u and ∂X/∂v
    let xu = e1 * inv[(0, 0)] + e2 * inv[(1, 0)];
    let xv = e1 * inv[(0, 1)] + e2 * inv[(1, 1)];
    let g = Matrix2::new(xu.dot(&xu), xu.dot(&xv), xu.dot(&xv), xv.dot(&xv));
    let Some(gi) = g.try_inverse() else { return n };
    // surface gradients of u and v
    let grad_u = xu * gi[(0, 0)] + xv * gi[(0, 1)];
    let grad_v = xu * gi[(1, 0)] + xv * gi[(1, 1)];
    normalize(&(n - grad_u * du - grad_v * dv))
}

/// Re-renders `image` at expression `new_w_exp`: face pixels are backward-warped
/// along the motion of the fitted surface, then rescaled by the ratio of new to
/// old detail shading. Pixels off the new face pass through.
pub fn resynthesize_expression(
    image: &LinearImage,
    fit: &FitResult,
    new_w_exp: &[f64],
    old_dmap: Option<&DisplacementMap>,
    new_dmap: Option<&DisplacementMap>,
    model: &BilinearModel,
) -> Result<LinearImage> {
    if image.width == 0 || image.height == 0 {
        return Err(Error::EmptyViewport);
    }
    let old = model.synthesize_mesh(&fit.w_id, &fit.w_exp)?;
    let new = model.synthesize_mesh(&fit.w_id, new_w_exp)?;
    let pose: &CameraPose = &fit.pose;
    let light: &Sh9<f64> = &fit.sh;
    let cov = rasterize_coverage(&new, pose, image.width, image.height)?;
    let old_screen: Vec<Vector2<f64>> = old.vertices.iter().map(|v| pose.project(v)).collect();
    let (old_n, new_n) = (old.vertex_normals(), new.vertex_normals());
    let mut out = image.clone();
    for (i, (&f, &b)) in cov.face.iter().zip(&cov.barycentric).enumerate() {
        if f == NO_FACE {
            continue;
        }
        let idx = new.faces()[f as usize].map(|k| k as usize);
        let src = old_screen[idx[0]] * b[0] + old_screen[idx[1]] * b[1] + old_screen[idx[2]] * b[2];
        let warped = image.sample(src.x, src.y);
        let s_old = sh_shade(&detail_normal(&old, &old_n, f as usize, b, old_dmap), light);
        let s_new = sh_shade(&detail_normal(&new, &new_n, f as usize, b, new_dmap), light);
        let ratio = Vector3::from_fn(|c, _| s_new[c] / s_old[c].max(SHADING_FLOOR));
        out.pixels[i] = warped.component_mul(&ratio);
    }
    Ok(out)
}
