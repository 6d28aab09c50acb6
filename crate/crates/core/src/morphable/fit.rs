use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use super::BilinearModel;
use crate::error::{Error, Result};
use crate::mesh::Bvh;
use crate::Mesh;

const MAX_OUTER: usize = 50;
const REL_TOLERANCE: f64 = 1e-8;
/// Joint initialization over `w_exp ⊗ w_id` is used up to this many unknowns.
const JOINT_INIT_LIMIT: usize = 120;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeshFit {
    /// Length `r_id`; entries past the requested count are zero.
    pub w_id: Vec<f64>,
    /// Length `r_exp`, unit norm; entries past the requested count are zero.
    pub w_exp: Vec<f64>,
    /// Distance of each fitted vertex to its correspondence on the target.
    pub per_vertex_error: Vec<f64>,
    /// Squared-distance energy after every half step (identity, then expression).
    pub energy_trace: Vec<f64>,
    pub iterations: usize,
}

/// Least squares with a pseudo-inverse fallback for rank-deficient systems.
fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let ata = a.tr_mul(a);
    let atb = a.tr_mul(b);
    let svd = ata.svd(true, true);
    let tol = svd.singular_values.max() * 1e-13;
    svd.solve(&atb, tol).unwrap_or_else(|_| DVector::zeros(a.ncols()))
}

fn energy(model: &[f64], target: &[f64]) -> f64 {
    model.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum()
}

fn normalize_gauge(w_id: &mut [f64], w_exp: &mut [f64]) {
    let s = w_exp.iter().map(|x| x * x).sum::<f64>().sqrt();
    if s == 0.0 {
        return;
    }
    let big = w_exp
        .iter()
        .cloned()
        .fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
    let s = if big < 0.0 { -s } else { s };
    w_exp.iter_mut().for_each(|x| *x /= s);
    w_id.iter_mut().for_each(|x| *x *= s);
}

/// Rank-one start from the unconstrained least-squares fit over `w_exp ⊗ w_id`.
fn joint_init(m: &BilinearModel, residual: &DVector<f64>, n_id: usize, n_exp: usize) -> (Vec<f64>, Vec<f64>) {
    let (ra, rb) = (m.r_exp(), m.r_id());
    let a = DMatrix::from_fn(m.vertex_dim(), n_exp * n_id, |k, j| {
        let (e, i) = (j / n_id, j % n_id);
        m.core[(k * ra + e) * rb + i]
    });
    let z = least_squares(&a, residual);
    let zm = DMatrix::from_row_slice(n_exp, n_id, z.as_slice());
    let svd = zm.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v"));
    let k = svd.singular_values.imax();
    let s = svd.singular_values[k];
    let mut w_exp = vec![0.0; ra];
    let mut w_id = vec![0.0; rb];
    for e in 0..n_exp {
        w_exp[e] = u[(e, k)];
    }
    for i in 0..n_id {
        w_id[i] = vt[(k, i)] * s;
    }
    (w_id, w_exp)
}

/// Alternating least-squares fit of identity and expression weights.
///
/// A target with the model's topology is matched vertex to vertex; any
/// other mesh is matched by closest surface points, refreshed every outer
/// iteration. Only the first `n_id` / `n_exp` weights are free.
pub fn fit_to_mesh(m: &BilinearModel, target: &Mesh, n_id: usize, n_exp: usize) -> Result<MeshFit> {
    if n_id == 0 || n_id > m.r_id() || n_exp == 0 || n_exp > m.r_exp() {
        return Err(Error::Invalid(format!(
            "parameter counts ({n_id}, {n_exp}) outside model ranks ({}, {})",
            m.r_id(),
            m.r_exp()
        )));
    }
    let registered = target.same_topology(&m.template)
        || (target.vertex_count() == m.template.vertex_count() && target.faces() == m.template.faces());
    let bvh = (!registered).then(|| Bvh::build(target));
    let correspond = |flat: &[f64]| -> Vec<f64> {
        match &bvh {
            None => target.flatten(),
            Some(b) => flat
                .chunks_exact(3)
                .flat_map(|c| {
                    let p = b
                        .closest_point(&Vector3::new(c[0], c[1], c[2]))
                        .expect("target has faces")
                        .point;
                    [p.x, p.y, p.z]
                })
                .collect(),
        }
    };
    if bvh.is_some() && target.face_count() == 0 {
        return Err(Error::NoOverlap);
    }
    let mean = DVector::from_column_slice(&m.mean_shape);

    // multi-start: the joint rank-one estimate and every training expression row,
    // each completed by an identity solve; ALS starts from the best of them
    let y = correspond(&m.mean_shape);
    let r0 = DVector::from_column_slice(&y) - &mean;
    let mut starts: Vec<Vec<f64>> = (0..m.expressions())
        .map(|e| {
            let mut w = vec![0.0; m.r_exp()];
            for a in 0..n_exp {
                w[a] = m.exp_basis[(e, a)];
            }
            w
        })
        .collect();
    if registered && n_id * n_exp <= JOINT_INIT_LIMIT {
        starts.insert(0, joint_init(m, &r0, n_id, n_exp).1);
    }
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    for w_exp in starts {
        if w_exp.iter().all(|&x| x == 0.0) {
            continue;
        }
        let a = m.contract_exp(&w_exp).columns(0, n_id).into_owned();
        let mut w_id = vec![0.0; m.r_id()];
        w_id[..n_id].copy_from_slice(least_squares(&a, &r0).as_slice());
        let e = energy(&m.synthesize(&w_id, &w_exp)?, &y);
        if best.as_ref().is_none_or(|b| e < b.0) {
            best = Some((e, w_id, w_exp));
        }
    }
    let (_, mut w_id, mut w_exp) = best.ok_or_else(|| Error::Invalid("model has no expression weights".into()))?;
    let mut y = y;
    normalize_gauge(&mut w_id, &mut w_exp);

    let mut trace = Vec::new();
    let mut prev = f64::INFINITY;
    let mut iterations = 0;
    for _ in 0..MAX_OUTER {
        iterations += 1;
        if bvh.is_some() {
            y = correspond(&m.synthesize(&w_id, &w_exp)?);
        }
        let r = DVector::from_column_slice(&y) - &mean;

        let a = m.contract_exp(&w_exp).columns(0, n_id).into_owned();
        let x = least_squares(&a, &r);
        w_id[..n_id].copy_from_slice(x.as_slice());
        trace.push(energy(&m.synthesize(&w_id, &w_exp)?, &y));

        let b = m.contract_id(&w_id).columns(0, n_exp).into_owned();
        let x = least_squares(&b, &r);
        w_exp[..n_exp].copy_from_slice(x.as_slice());
        normalize_gauge(&mut w_id, &mut w_exp);
        let e = energy(&m.synthesize(&w_id, &w_exp)?, &y);
        trace.push(e);

        if e <= 1e-24 || (prev.is_finite() && (prev - e).abs() <= REL_TOLERANCE * prev) {
            break;
        }
        prev = e;
    }
    let fitted = m.synthesize(&w_id, &w_exp)?;
    let y = correspond(&fitted);
    let per_vertex_error = fitted
        .chunks_exact(3)
        .zip(y.chunks_exact(3))
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
        .collect();
    Ok(MeshFit {
        w_id,
        w_exp,
        per_vertex_error,
        energy_trace: trace,
        iterations,
    })
}

/// Fraction of errors at or below each threshold.
pub fn cumulative_error_curve(errors: &[f64], thresholds: &[f64]) -> Vec<f64> {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len().max(1) as f64;
    thresholds
        .iter()
        .map(|t| sorted.partition_point(|e| e <= t) as f64 / n)
        .collect()
}
