use std::collections::HashMap;

use nalgebra::{Vector2, Vector3};

use super::TriMesh;
use crate::scalar::Real;

struct Refinement {
    /// `(lo, hi)` edge → index of its new vertex.
    edge_vertex: HashMap<(u32, u32), u32>,
    /// Per edge, the opposite vertices of its (one or two) faces.
    opposite: HashMap<(u32, u32), Vec<u32>>,
    faces: Vec<[u32; 3]>,
    edges: Vec<(u32, u32)>,
}

fn refine(faces: &[[u32; 3]], n_vertices: usize) -> Refinement {
    let mut opposite: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
    let mut edges = Vec::new();
    for f in faces {
        for k in 0..3 {
            let (a, b, c) = (f[k], f[(k + 1) % 3], f[(k + 2) % 3]);
            let key = (a.min(b), a.max(b));
            let e = opposite.entry(key).or_default();
            if e.is_empty() {
                edges.push(key);
            }
            e.push(c);
        }
    }
    let edge_vertex: HashMap<(u32, u32), u32> = edges
        .iter()
        .enumerate()
        .map(|(i, &e)| (e, (n_vertices + i) as u32))
        .collect();
    let mid = |a: u32, b: u32| edge_vertex[&(a.min(b), a.max(b))];
    let mut out = Vec::with_capacity(faces.len() * 4);
    for &[a, b, c] in faces {
        let (ab, bc, ca) = (mid(a, b), mid(b, c), mid(c, a));
        out.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
    }
    Refinement {
        edge_vertex,
        opposite,
        faces: out,
        edges,
    }
}

fn linear_uvs<T: Real>(uvs: Option<&[Vector2<T>]>, r: &Refinement) -> Option<Vec<Vector2<T>>> {
    uvs.map(|uv| {
        let mut out = uv.to_vec();
        for &(a, b) in &r.edges {
            out.push((uv[a as usize] + uv[b as usize]) * T::of(0.5));
        }
        debug_assert_eq!(out.len(), uv.len() + r.edge_vertex.len());
        out
    })
}

/// One 1→4 split with new vertices at edge midpoints; the surface is unchanged.
pub fn midpoint_subdivide<T: Real>(mesh: &TriMesh<T>) -> TriMesh<T> {
    let r = refine(mesh.faces(), mesh.vertex_count());
    let mut v = mesh.vertices.clone();
    for &(a, b) in &r.edges {
        v.push((mesh.vertices[a as usize] + mesh.vertices[b as usize]) * T::of(0.5));
    }
    let uvs = linear_uvs(mesh.uvs(), &r);
    TriMesh::new(v, r.faces, uvs).expect("refinement preserves validity")
}

/// Loop subdivision applied `levels` times, with boundary (crease) rules on open edges.
///
/// UVs are interpolated linearly so they stay on the original atlas triangles.
pub fn loop_subdivide<T: Real>(mesh: &TriMesh<T>, levels: usize) -> TriMesh<T> {
    let mut cur = mesh.clone();
    for _ in 0..levels {
        cur = loop_once(&cur);
    }
    cur
}

fn loop_once<T: Real>(mesh: &TriMesh<T>) -> TriMesh<T> {
    let n = mesh.vertex_count();
    let r = refine(mesh.faces(), n);
    let p = &mesh.vertices;

    let mut ring: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut boundary_nb: Vec<Vec<u32>> = vec![Vec::new(); n];
    for &(a, b) in &r.edges {
        ring[a as usize].push(b);
        ring[b as usize].push(a);
        if r.opposite[&(a, b)].len() == 1 {
            boundary_nb[a as usize].push(b);
            boundary_nb[b as usize].push(a);
        }
    }

    let mut v = Vec::with_capacity(n + r.edges.len());
    for i in 0..n {
        let bn = &boundary_nb[i];
        let nb = &ring[i];
        let pos = if bn.len() == 2 {
            p[i] * T::of(0.75) + (p[bn[0] as usize] + p[bn[1] as usize]) * T::of(0.125)
        } else if !bn.is_empty() || nb.is_empty() {
            // non-manifold boundary corner: keep fixed
            p[i]
        } else {
            let k = nb.len() as f64;
            let beta = if nb.len() == 3 { 3.0 / 16.0 } else { 3.0 / (8.0 * k) };
            let mut s = Vector3::zeros();
            for &j in nb {
                s += p[j as usize];
            }
            p[i] * T::of(1.0 - k * beta) + s * T::of(beta)
        };
        v.push(pos);
    }
    for &(a, b) in &r.edges {
        let opp = &r.opposite[&(a, b)];
        let (pa, pb) = (p[a as usize], p[b as usize]);
        let pos = if opp.len() == 2 {
            (pa + pb) * T::of(0.375) + (p[opp[0] as usize] + p[opp[1] as usize]) * T::of(0.125)
        } else {
            (pa + pb) * T::of(0.5)
        };
        v.push(pos);
    }
    let uvs = linear_uvs(mesh.uvs(), &r);
    TriMesh::new(v, r.faces, uvs).expect("refinement preserves validity")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::fixtures;

    #[test]
    fn counts_quadruple() {
        let s = fixtures::icosphere(1.0, 1);
        let m = loop_subdivide(&s, 2);
        assert_eq!(m.face_count(), s.face_count() * 16);
        assert_eq!(m.vertex_count(), 10 * 16 * 4 + 2);
    }

    #[test]
    fn plane_stays_planar_and_uvs_follow_positions() {
        let p = fixtures::plane(4, 3.0);
        let m = loop_subdivide(&p, 2);
        let uvs = m.uvs().unwrap();
        for v in &m.vertices {
            assert!(v.z.abs() < 1e-12);
        }
        // interior of a regular grid: Loop is affine-invariant so linear functions are preserved
        for (v, uv) in m.vertices.iter().zip(uvs) {
            if uv.x > 0.2 && uv.x < 0.8 && uv.y > 0.2 && uv.y < 0.8 {
                assert!((v.x - 3.0 * uv.x).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn midpoint_keeps_surface() {
        let s = fixtures::icosphere(2.0, 0);
        let m = midpoint_subdivide(&s);
        for v in &m.vertices[s.vertex_count()..] {
            assert!(v.norm() < 2.0);
        }
        assert!((m.surface_area() - s.surface_area()).abs() < 1e-9);
    }
}
