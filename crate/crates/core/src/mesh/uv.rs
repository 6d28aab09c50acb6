use nalgebra::{Vector2, Vector3};

use super::{SurfacePoint, TriMesh};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Uniform-grid lookup from UV coordinates to the containing atlas triangle.
///
/// Construction rejects atlases whose triangles overlap in their interiors.
#[derive(Clone, Debug)]
pub struct UvIndex<T: Real> {
    grid: usize,
    cells: Vec<Vec<u32>>,
    tris: Vec<[Vector2<T>; 3]>,
}

const OVERLAP_EPS: f64 = 1e-9;
const INSIDE_EPS: f64 = 1e-12;

#[inline]
fn cross2<T: Real>(a: Vector2<T>, b: Vector2<T>) -> T {
    a.x * b.y - a.y * b.x
}

impl<T: Real> UvIndex<T> {
    pub fn build(mesh: &TriMesh<T>) -> Result<Self> {
        let uvs = mesh.uvs().ok_or(Error::NoUvAtlas)?;
        let tris: Vec<[Vector2<T>; 3]> = mesh.faces().iter().map(|f| f.map(|i| uvs[i as usize])).collect();
        let grid = ((tris.len() as f64).sqrt().ceil() as usize).clamp(1, 2048);
        let mut cells = vec![Vec::new(); grid * grid];
        for (fi, t) in tris.iter().enumerate() {
            if cross2(t[1] - t[0], t[2] - t[0]).abs().f64() <= 0.0 {
                continue;
            }
            let (c0, c1, r0, r1) = Self::cell_span(grid, t);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    cells[r * grid + c].push(fi as u32);
                }
            }
        }
        let index = Self { grid, cells, tris };
        index.check_overlaps()?;
        Ok(index)
    }

    fn cell_span(grid: usize, t: &[Vector2<T>; 3]) -> (usize, usize, usize, usize) {
        let g = grid as f64;
        let to_cell = |x: T| ((x.f64() * g).floor().max(0.0) as usize).min(grid - 1);
        let (mut lo, mut hi) = (t[0], t[0]);
        for p in &t[1..] {
            lo = lo.zip_map(p, |a, b| a.min(b));
            hi = hi.zip_map(p, |a, b| a.max(b));
        }
        (to_cell(lo.x), to_cell(hi.x), to_cell(lo.y), to_cell(hi.y))
    }

    fn check_overlaps(&self) -> Result<()> {
        for cell in &self.cells {
            for (k, &a) in cell.iter().enumerate() {
                for &b in &cell[k + 1..] {
                    if interiors_overlap(&self.tris[a as usize], &self.tris[b as usize]) {
                        return Err(Error::UvOverlap(a as usize, b as usize));
                    }
                }
            }
        }
        Ok(())
    }

    /// Containing face and barycentric weights, or `None` outside the atlas.
    pub fn locate(&self, uv: Vector2<T>) -> Option<(usize, [T; 3])> {
        let g = self.grid as f64;
        let (u, v) = (uv.x.f64(), uv.y.f64());
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            return None;
        }
        let c = ((u * g) as usize).min(self.grid - 1);
        let r = ((v * g) as usize).min(self.grid - 1);
        for &fi in &self.cells[r * self.grid + c] {
            let [a, b, cc] = self.tris[fi as usize];
            let den = cross2(b - a, cc - a);
            let b1 = cross2(uv - a, cc - a) / den;
            let b2 = cross2(b - a, uv - a) / den;
            let b0 = T::one() - b1 - b2;
            let eps = T::of(-INSIDE_EPS);
            if b0 >= eps && b1 >= eps && b2 >= eps {
                let clamp = |x: T| x.max(T::zero());
                let (b0, b1, b2) = (clamp(b0), clamp(b1), clamp(b2));
                let s = b0 + b1 + b2;
                let bary = if s == T::one() {
                    [b0, b1, b2]
                } else {
                    [b0 / s, b1 / s, b2 / s]
                };
                return Some((fi as usize, bary));
            }
        }
        None
    }

    pub fn surface_point(&self, mesh: &TriMesh<T>, normals: &[Vector3<T>], uv: Vector2<T>) -> Option<SurfacePoint<T>> {
        let (face, bary) = self.locate(uv)?;
        Some(mesh.surface_point(face, bary, normals))
    }
}

/// Separating-axis test; touching along shared edges or vertices is not overlap.
fn interiors_overlap<T: Real>(a: &[Vector2<T>; 3], b: &[Vector2<T>; 3]) -> bool {
    let a = a.map(|p| Vector2::new(p.x.f64(), p.y.f64()));
    let b = b.map(|p| Vector2::new(p.x.f64(), p.y.f64()));
    let scale = a
        .iter()
        .chain(&b)
        .map(|p| p.x.abs().max(p.y.abs()))
        .fold(1e-300, f64::max);
    for tri in [&a, &b] {
        for k in 0..3 {
            let e = tri[(k + 1) % 3] - tri[k];
            let axis = Vector2::new(-e.y, e.x);
            let len = axis.norm();
            if len == 0.0 {
                continue;
            }
            let axis = axis / len;
            let proj = |t: &[Vector2<f64>; 3]| {
                let d: Vec<f64> = t.iter().map(|p| p.dot(&axis)).collect();
                (d[0].min(d[1]).min(d[2]), d[0].max(d[1]).max(d[2]))
            };
            let (amin, amax) = proj(&a);
            let (bmin, bmax) = proj(&b);
            let eps = OVERLAP_EPS * scale;
            if amax <= bmin + eps || bmax <= amin + eps {
                return false;
            }
        }
    }
    true
}

/// Convenience wrapper that builds a throwaway [`UvIndex`].
pub fn surface_point_from_uv<T: Real>(mesh: &TriMesh<T>, uv: Vector2<T>) -> Result<Option<SurfacePoint<T>>> {
    let index = UvIndex::build(mesh)?;
    let normals = mesh.vertex_normals();
    Ok(index.surface_point(mesh, &normals, uv))
}
