//! Indexed triangle meshes with an optional per-vertex UV atlas.
//!
//! All lengths are millimeters. UV coordinates live in `[0,1]²`.

mod bvh;
pub mod io;
mod subdivide;
mod uv;

use std::fmt;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub use bvh::{Bvh, ClosestPoint, RayHit};
pub use subdivide::{loop_subdivide, midpoint_subdivide};
pub use uv::{surface_point_from_uv, UvIndex};

/// Opaque hash of a mesh's faces and UV layout.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TopologyId(pub [u8; 16]);

impl fmt::Debug for TopologyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TopologyId({self})")
    }
}

impl fmt::Display for TopologyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriMesh<T: Real> {
    pub vertices: Vec<Vector3<T>>,
    faces: Vec<[u32; 3]>,
    uvs: Option<Vec<Vector2<T>>>,
}

/// A point on a mesh surface, located by face and barycentric weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfacePoint<T: Real> {
    pub face: usize,
    pub barycentric: [T; 3],
    pub position: Vector3<T>,
    pub normal: Vector3<T>,
}

impl<T: Real> TriMesh<T> {
    pub fn new(vertices: Vec<Vector3<T>>, faces: Vec<[u32; 3]>, uvs: Option<Vec<Vector2<T>>>) -> Result<Self> {
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            if f.iter().any(|&i| i as usize >= n) {
                return Err(Error::MalformedMesh(format!(
                    "face {fi} references vertex {:?} but mesh has {n} vertices",
                    f
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::MalformedMesh(format!("face {fi} is degenerate: {f:?}")));
            }
        }
        if let Some(uv) = &uvs {
            if uv.len() != n {
                return Err(Error::MalformedMesh(format!("{} uvs for {n} vertices", uv.len())));
            }
        }
        Ok(Self { vertices, faces, uvs })
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn uvs(&self) -> Option<&[Vector2<T>]> {
        self.uvs.as_deref()
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Same topology and UVs, new vertex positions.
    pub fn with_vertices(&self, vertices: Vec<Vector3<T>>) -> Self {
        assert_eq!(vertices.len(), self.vertices.len(), "vertex count changed");
        Self {
            vertices,
            faces: self.faces.clone(),
            uvs: self.uvs.clone(),
        }
    }

    pub fn without_uvs(mut self) -> Self {
        self.uvs = None;
        self
    }

    pub fn topology_id(&self) -> TopologyId {
        let mut h = Sha256::new();
        h.update((self.faces.len() as u64).to_le_bytes());
        for f in &self.faces {
            for i in f {
                h.update(i.to_le_bytes());
            }
        }
        match &self.uvs {
            None => h.update([0u8]),
            Some(uvs) => {
                h.update([1u8]);
                for uv in uvs {
                    h.update(uv.x.f64().to_le_bytes());
                    h.update(uv.y.f64().to_le_bytes());
                }
            }
        }
        let digest = h.finalize();
        let mut id = [0u8; 16];
        id.copy_from_slice(&digest[..16]);
        TopologyId(id)
    }

    pub fn same_topology(&self, other: &Self) -> bool {
        self.vertices.len() == other.vertices.len() && self.faces == other.faces && self.uvs == other.uvs
    }

    pub fn convert<U: Real>(&self) -> TriMesh<U> {
        TriMesh {
            vertices: self.vertices.iter().map(|v| v.map(|x| U::of(x.f64()))).collect(),
            faces: self.faces.clone(),
            uvs: self
                .uvs
                .as_ref()
                .map(|uv| uv.iter().map(|p| p.map(|x| U::of(x.f64()))).collect()),
        }
    }

    #[inline]
    pub fn triangle(&self, face: usize) -> [Vector3<T>; 3] {
        let [a, b, c] = self.faces[face];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    /// Unnormalized face normal (twice the area, counter-clockwise winding).
    pub fn face_area_normal(&self, face: usize) -> Vector3<T> {
        let [a, b, c] = self.triangle(face);
        (b - a).cross(&(c - a))
    }

    pub fn face_normal(&self, face: usize) -> Vector3<T> {
        normalize(&self.face_area_normal(face))
    }

    pub fn face_area(&self, face: usize) -> T {
        norm(&self.face_area_normal(face)) * T::of(0.5)
    }

    pub fn surface_area(&self) -> T {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Area-weighted vertex normals; isolated vertices get the zero vector.
    pub fn vertex_normals(&self) -> Vec<Vector3<T>> {
        let mut acc = vec![Vector3::zeros(); self.vertices.len()];
        for (fi, f) in self.faces.iter().enumerate() {
            let n = self.face_area_normal(fi);
            for &i in f {
                acc[i as usize] += n;
            }
        }
        acc.iter().map(normalize).collect()
    }

    /// Sorted, deduplicated 1-ring neighbour lists.
    pub fn vertex_neighbors(&self) -> Vec<Vec<u32>> {
        let mut nb = vec![Vec::new(); self.vertices.len()];
        for f in &self.faces {
            for k in 0..3 {
                let a = f[k];
                let b = f[(k + 1) % 3];
                nb[a as usize].push(b);
                nb[b as usize].push(a);
            }
        }
        for l in &mut nb {
            l.sort_unstable();
            l.dedup();
        }
        nb
    }

    /// Undirected edges `(lo, hi)`, sorted.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        let mut e: Vec<(u32, u32)> = self
            .faces
            .iter()
            .flat_map(|f| {
                (0..3).map(move |k| {
                    let (a, b) = (f[k], f[(k + 1) % 3]);
                    (a.min(b), a.max(b))
                })
            })
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    /// Vertices on at least one edge used by a single face.
    pub fn boundary_vertices(&self) -> Vec<bool> {
        let mut count = std::collections::HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_insert(0u32) += 1;
            }
        }
        let mut flags = vec![false; self.vertices.len()];
        for ((a, b), c) in count {
            if c == 1 {
                flags[a as usize] = true;
                flags[b as usize] = true;
            }
        }
        flags
    }

    /// Uniform-weight umbrella smoothing `v ← v + step·(mean(N(v)) − v)`.
    pub fn laplacian_smooth(&self, iterations: usize, step: T) -> Self {
        let nb = self.vertex_neighbors();
        let mut cur = self.vertices.clone();
        for _ in 0..iterations {
            let next: Vec<Vector3<T>> = cur
                .iter()
                .zip(&nb)
                .map(|(v, ring)| {
                    if ring.is_empty() {
                        return *v;
                    }
                    let mut mean = Vector3::zeros();
                    for &j in ring {
                        mean += cur[j as usize];
                    }
                    mean /= T::of(ring.len() as f64);
                    v + (mean - v) * step
                })
                .collect();
            cur = next;
        }
        self.with_vertices(cur)
    }

    pub fn surface_point(&self, face: usize, barycentric: [T; 3], normals: &[Vector3<T>]) -> SurfacePoint<T> {
        let [a, b, c] = self.faces[face].map(|i| i as usize);
        let [w0, w1, w2] = barycentric;
        let position = self.vertices[a] * w0 + self.vertices[b] * w1 + self.vertices[c] * w2;
        let n = normals[a] * w0 + normals[b] * w1 + normals[c] * w2;
        let normal = if norm(&n) > T::zero() {
            normalize(&n)
        } else {
            self.face_normal(face)
        };
        SurfacePoint {
            face,
            barycentric,
            position,
            normal,
        }
    }

    pub fn uv_at(&self, face: usize, barycentric: [T; 3]) -> Option<Vector2<T>> {
        let uvs = self.uvs.as_ref()?;
        let [a, b, c] = self.faces[face].map(|i| i as usize);
        Some(uvs[a] * barycentric[0] + uvs[b] * barycentric[1] + uvs[c] * barycentric[2])
    }

    pub fn translated(&self, t: Vector3<T>) -> Self {
        self.with_vertices(self.vertices.iter().map(|v| v + t).collect())
    }

    /// Flat `x0 y0 z0 x1 …` buffer.
    pub fn flatten(&self) -> Vec<T> {
        self.vertices.iter().flat_map(|v| [v.x, v.y, v.z]).collect()
    }

    pub fn with_flat(&self, flat: &[T]) -> Self {
        assert_eq!(flat.len(), 3 * self.vertices.len());
        self.with_vertices(flat.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect())
    }
}

#[inline]
pub fn norm<T: Real>(v: &Vector3<T>) -> T {
    v.dot(v).sqrt()
}

/// Unit vector, or zero for the zero vector.
#[inline]
pub fn normalize<T: Real>(v: &Vector3<T>) -> Vector3<T> {
    let n = norm(v);
    if n > T::zero() {
        v / n
    } else {
        Vector3::zeros()
    }
}

/// Deterministic area-weighted surface samples from a seeded stream.
pub fn sample_surface<T: Real, R: rand::Rng>(mesh: &TriMesh<T>, count: usize, rng: &mut R) -> Vec<Vector3<T>> {
    let mut cdf = Vec::with_capacity(mesh.face_count());
    let mut acc = 0.0;
    for f in 0..mesh.face_count() {
        acc += mesh.face_area(f).f64();
        cdf.push(acc);
    }
    (0..count)
        .map(|_| {
            let r = rng.random::<f64>() * acc;
            let f = cdf.partition_point(|&c| c < r).min(cdf.len() - 1);
            let (mut u, mut v) = (rng.random::<f64>(), rng.random::<f64>());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            let [a, b, c] = mesh.triangle(f);
            a * T::of(1.0 - u - v) + b * T::of(u) + c * T::of(v)
        })
        .collect()
}
