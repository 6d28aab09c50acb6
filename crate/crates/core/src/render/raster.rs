use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use super::camera::CameraPose;
use super::image::LinearImage;
use super::sh::{sh_shade, Sh9};
use crate::error::{Error, Result};
use crate::mesh::normalize;
use crate::Mesh;

pub const MAX_RESOLUTION: usize = 2048;
/// Face id of uncovered pixels.
pub const NO_FACE: u32 = u32::MAX;
const BAND_ROWS: usize = 16;

/// Per-pixel visibility: nearest face, barycentrics and camera depth.
#[derive(Clone, Debug, PartialEq)]
pub struct Coverage {
    pub width: usize,
    pub height: usize,
    /// Camera depth in mm; `+∞` where uncovered.
    pub depth: Vec<f64>,
    pub face: Vec<u32>,
    pub barycentric: Vec<[f64; 3]>,
}

impl Coverage {
    pub fn covered_count(&self) -> usize {
        self.face.iter().filter(|&&f| f != NO_FACE).count()
    }
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub color: LinearImage,
    pub coverage: Coverage,
    pub vertex_visible: Vec<bool>,
}

struct ScreenTriangle {
    face: u32,
    /// Vertices ordered so that the doubled signed area is positive.
    p: [Vector2<f64>; 3],
    z: [f64; 3],
    /// Original corner index of each ordered vertex.
    corner: [usize; 3],
    area2: f64,
    /// Edge `k` runs from `p[k]` to `p[(k+1)%3]`.
    top_left: [bool; 3],
    rows: (usize, usize),
    cols: (usize, usize),
}

/// Projection split into an integer pixel offset and a local frame, so an
/// integer shift of `t` moves coverage without changing any arithmetic.
struct Frame {
    offset: (i64, i64),
    local: CameraPose,
}

impl Frame {
    fn new(pose: &CameraPose) -> Self {
        let fl = pose.t.map(f64::floor);
        Self {
            offset: (fl.x as i64, fl.y as i64),
            local: CameraPose {
                t: pose.t - fl,
                ..*pose
            },
        }
    }

    /// Local coordinates of the center of pixel `(row, col)`.
    #[inline]
    fn center(&self, row: usize, col: usize) -> Vector2<f64> {
        Vector2::new(
            (col as i64 - self.offset.0) as f64 + 0.5,
            (row as i64 - self.offset.1) as f64 + 0.5,
        )
    }
}

#[inline]
fn edge(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

fn check_viewport(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::EmptyViewport);
    }
    if width > MAX_RESOLUTION || height > MAX_RESOLUTION {
        return Err(Error::Invalid(format!(
            "viewport {width}×{height} exceeds {MAX_RESOLUTION}²"
        )));
    }
    Ok(())
}

fn setup(mesh: &Mesh, frame: &Frame, width: usize, height: usize) -> Vec<ScreenTriangle> {
    let pose = &frame.local;
    let screen: Vec<Vector2<f64>> = mesh.vertices.iter().map(|v| pose.project(v)).collect();
    let depth: Vec<f64> = mesh.vertices.iter().map(|v| pose.depth(v)).collect();
    mesh.faces()
        .iter()
        .enumerate()
        .filter_map(|(fi, f)| {
            let idx = f.map(|i| i as usize);
            let mut corner = [0, 1, 2];
            let mut p = idx.map(|i| screen[i]);
            let mut area2 = edge(&p[0], &p[1], &p[2]);
            if !area2.is_finite() || area2 == 0.0 {
                return None;
            }
            if area2 < 0.0 {
                p.swap(1, 2);
                corner.swap(1, 2);
                area2 = -area2;
            }
            let z = corner.map(|c| depth[idx[c]]);
            let top_left = [0, 1, 2].map(|k| {
                let d = p[(k + 1) % 3] - p[k];
                (d.y == 0.0 && d.x > 0.0) || d.y < 0.0
            });
            let (xmin, xmax) = (p[0].x.min(p[1].x).min(p[2].x), p[0].x.max(p[1].x).max(p[2].x));
            let (ymin, ymax) = (p[0].y.min(p[1].y).min(p[2].y), p[0].y.max(p[1].y).max(p[2].y));
            // local pixel k has its center at k + 0.5
            let lo = |v: f64, off: i64| ((v - 0.5).ceil() + off as f64).max(0.0);
            let hi = |v: f64, off: i64, n: usize| ((v - 0.5).floor() + off as f64).min(n as f64 - 1.0);
            let (r0, r1) = (lo(ymin, frame.offset.1), hi(ymax, frame.offset.1, height));
            let (c0, c1) = (lo(xmin, frame.offset.0), hi(xmax, frame.offset.0, width));
            if r0 > r1 || c0 > c1 {
                return None;
            }
            Some(ScreenTriangle {
                face: fi as u32,
                p,
                z,
                corner,
                area2,
                top_left,
                rows: (r0 as usize, r1 as usize),
                cols: (c0 as usize, c1 as usize),
            })
        })
        .collect()
}

/// Z-buffered coverage with the top-left fill rule; ties keep the lower face id.
pub fn rasterize_coverage(mesh: &Mesh, pose: &CameraPose, width: usize, height: usize) -> Result<Coverage> {
    check_viewport(width, height)?;
    let frame = Frame::new(pose);
    let tris = setup(mesh, &frame, width, height);
    let bands = height.div_ceil(BAND_ROWS);
    let mut binned: Vec<Vec<u32>> = vec![Vec::new(); bands];
    for (ti, t) in tris.iter().enumerate() {
        for list in &mut binned[t.rows.0 / BAND_ROWS..=t.rows.1 / BAND_ROWS] {
            list.push(ti as u32);
        }
    }
    let parts: Vec<(Vec<f64>, Vec<u32>, Vec<[f64; 3]>)> = binned
        .par_iter()
        .enumerate()
        .map(|(band, list)| {
            let row0 = band * BAND_ROWS;
            let rows = BAND_ROWS.min(height - row0);
            let mut depth = vec![f64::INFINITY; rows * width];
            let mut face = vec![NO_FACE; rows * width];
            let mut bary = vec![[0.0; 3]; rows * width];
            for &ti in list {
                let t = &tris[ti as usize];
                let (ra, rb) = (t.rows.0.max(row0), t.rows.1.min(row0 + rows - 1));
                for r in ra..=rb {
                    for c in t.cols.0..=t.cols.1 {
                        let q = frame.center(r, c);
                        let mut w = [0.0; 3];
                        let mut inside = true;
                        for k in 0..3 {
                            let e = edge(&t.p[k], &t.p[(k + 1) % 3], &q);
                            if e < 0.0 || (e == 0.0 && !t.top_left[k]) {
                                inside = false;
                                break;
                            }
                            // edge k is opposite vertex (k+2)%3
                            w[(k + 2) % 3] = e / t.area2;
                        }
                        if !inside {
                            continue;
                        }
                        let z = w[0] * t.z[0] + w[1] * t.z[1] + w[2] * t.z[2];
                        let i = (r - row0) * width + c;
                        if z < depth[i] {
                            depth[i] = z;
                            face[i] = t.face;
                            let mut b = [0.0; 3];
                            for k in 0..3 {
                                b[t.corner[k]] = w[k];
                            }
                            bary[i] = b;
                        }
                    }
                }
            }
            (depth, face, bary)
        })
        .collect();
    let mut out = Coverage {
        width,
        height,
        depth: Vec::with_capacity(width * height),
        face: Vec::with_capacity(width * height),
        barycentric: Vec::with_capacity(width * height),
    };
    for (d, f, b) in parts {
        out.depth.extend(d);
        out.face.extend(f);
        out.barycentric.extend(b);
    }
    Ok(out)
}

/// A vertex is visible when it projects inside the viewport onto a covered
/// pixel whose buffered depth it does not exceed by more than `3/s` mm.
pub fn vertex_visibility(mesh: &Mesh, pose: &CameraPose, cov: &Coverage) -> Vec<bool> {
    let tol = 3.0 / pose.s.abs().max(1e-12);
    mesh.vertices
        .iter()
        .map(|v| {
            let p = pose.project(v);
            if !(p.x >= 0.0 && p.y >= 0.0 && p.x < cov.width as f64 && p.y < cov.height as f64) {
                return false;
            }
            let i = p.y as usize * cov.width + p.x as usize;
            cov.face[i] != NO_FACE && pose.depth(v) <= cov.depth[i] + tol
        })
        .collect()
}

/// Albedo × SH shading at a surface point with interpolated, renormalized normal.
/// Both the renderer and the photometric energy evaluate pixels through this.
#[inline]
pub fn shade_sample(
    normals: &[Vector3<f64>],
    albedo: &[Vector3<f64>],
    face: [u32; 3],
    bary: [f64; 3],
    light: &Sh9<f64>,
) -> Vector3<f64> {
    let [a, b, c] = face.map(|i| i as usize);
    let n = normalize(&(normals[a] * bary[0] + normals[b] * bary[1] + normals[c] * bary[2]));
    let rho = albedo[a] * bary[0] + albedo[b] * bary[1] + albedo[c] * bary[2];
    rho.component_mul(&sh_shade(&n, light))
}

/// Renders `mesh` with per-vertex albedo under SH lighting; background is black.
pub fn rasterize(
    mesh: &Mesh,
    albedo: &[Vector3<f64>],
    pose: &CameraPose,
    light: &Sh9<f64>,
    width: usize,
    height: usize,
) -> Result<RenderOutput> {
    if albedo.len() != mesh.vertex_count() {
        return Err(Error::DimensionMismatch {
            expected: mesh.vertex_count(),
            got: albedo.len(),
        });
    }
    let coverage = rasterize_coverage(mesh, pose, width, height)?;
    let normals = mesh.vertex_normals();
    let faces = mesh.faces();
    let pixels = coverage
        .face
        .par_iter()
        .zip(&coverage.barycentric)
        .map(|(&f, b)| {
            if f == NO_FACE {
                Vector3::zeros()
            } else {
                shade_sample(&normals, albedo, faces[f as usize], *b, light)
            }
        })
        .collect();
    let vertex_visible = vertex_visibility(mesh, pose, &coverage);
    Ok(RenderOutput {
        color: LinearImage { width, height, pixels },
        coverage,
        vertex_visible,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::fixtures;
    use crate::mesh::TriMesh;
    use nalgebra::Matrix3;

    fn screen_pose() -> CameraPose {
        CameraPose {
            s: 1.0,
            r: Matrix3::identity(),
            t: Vector2::zeros(),
        }
    }

    fn tri_mesh(pts: &[[f64; 3]], faces: Vec<[u32; 3]>) -> Mesh {
        TriMesh::new(
            pts.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect(),
            faces,
            None,
        )
        .unwrap()
    }

    #[test]
    fn half_viewport_triangle() {
        let n = 64;
        let w = n as f64;
        let m = tri_mesh(&[[0.0, 0.0, 0.0], [w, 0.0, 0.0], [0.0, w, 0.0]], vec![[0, 1, 2]]);
        let albedo = vec![Vector3::repeat(0.5); 3];
        let out = rasterize(&m, &albedo, &screen_pose(), &Sh9::ambient(1.0), n, n).unwrap();
        let covered = out.coverage.covered_count();
        assert!(covered >= n * (n - 1) / 2 && covered <= n * (n + 1) / 2, "{covered}");
        for (p, &f) in out.color.pixels.iter().zip(&out.coverage.face) {
            if f != NO_FACE {
                assert!((p - Vector3::repeat(0.5)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn shared_edges_cover_each_pixel_once() {
        // a fan around an interior vertex, corners on pixel-center lattice lines
        let pts = [
            [2.5, 3.5, 0.0],
            [29.5, 1.0, 0.0],
            [30.0, 30.5, 0.0],
            [1.5, 28.5, 0.0],
            [16.5, 15.5, 0.0],
        ];
        let faces = vec![[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]];
        let mut counts = vec![0u32; 32 * 32];
        for f in &faces {
            let m = tri_mesh(&pts, vec![*f]);
            let cov = rasterize_coverage(&m, &screen_pose(), 32, 32).unwrap();
            for (c, &fi) in counts.iter_mut().zip(&cov.face) {
                *c += (fi != NO_FACE) as u32;
            }
        }
        assert!(counts.iter().all(|&c| c <= 1));
        let whole = rasterize_coverage(&tri_mesh(&pts, faces), &screen_pose(), 32, 32).unwrap();
        assert_eq!(whole.covered_count(), counts.iter().sum::<u32>() as usize);
    }

    #[test]
    fn nearer_triangle_wins_in_either_order() {
        let near = [[0.0, 0.0, 1.0], [40.0, 0.0, 1.0], [0.0, 40.0, 1.0]];
        let far = [[0.0, 0.0, 5.0], [40.0, 0.0, 5.0], [20.0, 40.0, 5.0]];
        for swap in [false, true] {
            let mut pts: Vec<[f64; 3]> = near.iter().chain(&far).cloned().collect();
            if swap {
                pts.rotate_left(3);
            }
            let m = tri_mesh(&pts, vec![[0, 1, 2], [3, 4, 5]]);
            let cov = rasterize_coverage(&m, &screen_pose(), 40, 40).unwrap();
            let near_face = if swap { 1 } else { 0 };
            let mut both = 0;
            for i in 0..1600 {
                if cov.face[i] == NO_FACE {
                    continue;
                }
                if cov.depth[i] < 3.0 {
                    assert_eq!(cov.face[i], near_face);
                    both += 1;
                } else {
                    assert!((cov.depth[i] - 5.0).abs() < 1e-12);
                }
            }
            assert!(both > 500);
        }
    }

    #[test]
    fn integer_translation_shifts_exactly() {
        let m = fixtures::icosphere(20.0, 3);
        let a = CameraPose::frontal(1.3, Vector2::new(30.25, 31.75));
        let b = CameraPose {
            t: a.t + Vector2::new(5.0, -3.0),
            ..a
        };
        let ca = rasterize_coverage(&m, &a, 80, 80).unwrap();
        let cb = rasterize_coverage(&m, &b, 80, 80).unwrap();
        for r in 3..77 {
            for c in 0..75 {
                assert_eq!(ca.face[r * 80 + c], cb.face[(r - 3) * 80 + c + 5]);
                assert_eq!(ca.barycentric[r * 80 + c], cb.barycentric[(r - 3) * 80 + c + 5]);
            }
        }
    }

    #[test]
    fn sphere_matches_analytic_shading() {
        let n = 512;
        let radius = 100.0;
        let pose = CameraPose::frontal(2.4, Vector2::new(256.0, 256.0));
        let light = Sh9::directional(&Vector3::new(0.4, 0.5, 1.0), Vector3::new(0.8, 0.7, 0.6), 0.2);
        let rho = Vector3::new(0.6, 0.5, 0.4);
        let m = fixtures::icosphere(radius, 5);
        let out = rasterize(&m, &vec![rho; m.vertex_count()], &pose, &light, n, n).unwrap();
        let mut checked = 0;
        for r in 0..n {
            for c in 0..n {
                let x = (c as f64 + 0.5 - 256.0) / pose.s;
                let y = -(r as f64 + 0.5 - 256.0) / pose.s;
                // skip the two-pixel silhouette band where coverage differs
                let inner = radius - 2.0 / pose.s;
                if x * x + y * y >= inner * inner {
                    continue;
                }
                let normal = Vector3::new(x, y, (radius * radius - x * x - y * y).sqrt()) / radius;
                let expect = rho.component_mul(&sh_shade(&normal, &light));
                let got = out.color.get(r, c);
                assert!((got - expect).amax() < 2.0 / 255.0, "{r},{c}: {got} vs {expect}");
                checked += 1;
            }
        }
        assert!(checked > 100_000);
    }

    #[test]
    fn visible_vertices_are_not_occluded() {
        let m = fixtures::icosphere(30.0, 3);
        let pose = CameraPose::frontal(2.0, Vector2::new(64.0, 64.0)).rotated(&Vector3::new(0.2, -0.4, 0.1));
        let out = rasterize(
            &m,
            &vec![Vector3::repeat(1.0); m.vertex_count()],
            &pose,
            &Sh9::ambient(1.0),
            128,
            128,
        )
        .unwrap();
        let normals = m.vertex_normals();
        let mut front = 0;
        for (i, v) in m.vertices.iter().enumerate() {
            let facing = pose.r.row(2).transpose().dot(&normals[i]);
            if out.vertex_visible[i] {
                let p = pose.project(v);
                let k = p.y as usize * 128 + p.x as usize;
                assert!(pose.depth(v) <= out.coverage.depth[k] + 3.0 / pose.s);
                assert!(facing < 0.3);
            }
            if facing < -0.5 {
                assert!(out.vertex_visible[i]);
                front += 1;
            }
        }
        assert!(front > 50);
    }

    #[test]
    fn viewport_errors() {
        let m = fixtures::tetrahedron();
        assert!(matches!(
            rasterize_coverage(&m, &screen_pose(), 0, 10),
            Err(Error::EmptyViewport)
        ));
        assert!(matches!(
            rasterize_coverage(&m, &screen_pose(), 4096, 10),
            Err(Error::Invalid(_))
        ));
    }

    #[test]
    fn rendering_is_deterministic() {
        let m = fixtures::icosphere(25.0, 2);
        let pose = CameraPose::frontal(1.7, Vector2::new(40.3, 38.9));
        let light = Sh9::directional(&Vector3::new(1.0, 1.0, 1.0), Vector3::repeat(0.9), 0.1);
        let alb = vec![Vector3::new(0.7, 0.6, 0.5); m.vertex_count()];
        let a = rasterize(&m, &alb, &pose, &light, 80, 80).unwrap();
        let b = rasterize(&m, &alb, &pose, &light, 80, 80).unwrap();
        assert_eq!(a.color, b.color);
        assert_eq!(a.coverage, b.coverage);
    }
}
