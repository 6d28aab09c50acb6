//! Deformation transfer: per-triangle deformation gradients of a source pair,
//! reproduced on a target mesh by a sparse least-squares solve.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::linalg::SparseBuilder;
use crate::Mesh;

/// Edge frame `[v1−v0, v2−v0, n]` with the fourth vertex offset `n = e1×e2/√‖e1×e2‖`.
fn frame(m: &Mesh, face: usize) -> Matrix3<f64> {
    let [a, b, c] = m.triangle(face);
    let (e1, e2) = (b - a, c - a);
    let n = e1.cross(&e2);
    let n = n / n.norm().sqrt();
    Matrix3::from_columns(&[e1, e2, n])
}

/// Per-triangle deformation gradients `V'·V⁻¹` from `rest` to `deformed`.
pub fn deformation_gradients(rest: &Mesh, deformed: &Mesh) -> Result<Vec<Matrix3<f64>>> {
    if !rest.same_topology(deformed) {
        return Err(Error::TopologyMismatch);
    }
    (0..rest.face_count())
        .map(|f| {
            let inv = frame(rest, f)
                .try_inverse()
                .ok_or_else(|| Error::Invalid(format!("degenerate triangle {f}")))?;
            Ok(frame(deformed, f) * inv)
        })
        .collect()
}

/// Applies the deformation `src_neutral → src_expr` to `tgt_neutral`.
///
/// Vertex 0 stays at its position in `tgt_neutral`.
pub fn deformation_transfer(src_neutral: &Mesh, src_expr: &Mesh, tgt_neutral: &Mesh) -> Result<Mesh> {
    if !src_neutral.same_topology(src_expr) || !src_neutral.same_topology(tgt_neutral) {
        return Err(Error::TopologyMismatch);
    }
    let n = tgt_neutral.vertex_count();
    let nf = tgt_neutral.face_count();
    if n == 0 {
        return Ok(tgt_neutral.clone());
    }
    let grads = deformation_gradients(src_neutral, src_expr)?;

    // unknowns: vertices 1..n, then one auxiliary vertex per face
    let unknown = |v: usize| -> Option<usize> { (v != 0).then(|| v - 1) };
    let dim = n - 1 + nf;
    let anchor = tgt_neutral.vertices[0];
    let mut a = SparseBuilder::new(dim);
    let mut rhs = vec![vec![0.0; dim]; 3];

    for f in 0..nf {
        let q = frame(tgt_neutral, f)
            .try_inverse()
            .ok_or_else(|| Error::Invalid(format!("degenerate target triangle {f}")))?;
        let [i0, i1, i2] = tgt_neutral.faces()[f].map(|i| i as usize);
        for k in 0..3 {
            // row k of Tᵀ: Σ_m (x_{m+1} − x_0)·Q[m,k]
            let coeffs = [
                (Some(i0), -(q[(0, k)] + q[(1, k)] + q[(2, k)])),
                (Some(i1), q[(0, k)]),
                (Some(i2), q[(1, k)]),
                (None, q[(2, k)]),
            ];
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
            let mut known = Vector3::zeros();
            for (v, c) in coeffs {
                match v {
                    Some(v) => match unknown(v) {
                        Some(u) => row.push((u, c)),
                        None => known += anchor * c,
                    },
                    None => row.push((n - 1 + f, c)),
                }
            }
            a.add_outer(&row, 1.0);
            for coord in 0..3 {
                let b = grads[f][(coord, k)] - known[coord];
                for &(u, c) in &row {
                    rhs[coord][u] += c * b;
                }
            }
        }
    }
    let sol = a.solve(&rhs)?;
    let mut out = Vec::with_capacity(n);
    out.push(anchor);
    for v in 1..n {
        out.push(Vector3::new(sol[0][v - 1], sol[1][v - 1], sol[2][v - 1]));
    }
    Ok(tgt_neutral.with_vertices(out))
}
