use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::BilinearModel;
use crate::error::{Error, Result};
use crate::Mesh;

/// Vertex × expression × identity data tensor, stored vertex-major:
/// entry `(k, e, i)` lives at `(k·E + e)·I + i`.
#[derive(Clone, Debug)]
pub struct Rank3Tensor {
    pub vertex_dim: usize,
    pub expressions: usize,
    pub identities: usize,
    pub data: Vec<f64>,
    /// Subtracted from every slice before decomposition (zero when disabled).
    pub mean_shape: Vec<f64>,
    pub mean_subtracted: bool,
    /// Topology carrier (faces and UVs) for meshes built from this tensor.
    pub template: Mesh,
}

impl Rank3Tensor {
    #[inline]
    pub fn index(&self, k: usize, e: usize, i: usize) -> usize {
        (k * self.expressions + e) * self.identities + i
    }

    #[inline]
    pub fn at(&self, k: usize, e: usize, i: usize) -> f64 {
        self.data[self.index(k, e, i)]
    }

    /// Flattened vertices of cell `(identity, expression)` minus the mean.
    pub fn slice(&self, identity: usize, expression: usize) -> Vec<f64> {
        (0..self.vertex_dim).map(|k| self.at(k, expression, identity)).collect()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `Σ_{k,i} T[k,e,i]·T[k,e',i]`
    fn expression_gram(&self) -> DMatrix<f64> {
        let (e_n, i_n) = (self.expressions, self.identities);
        let mut g = DMatrix::zeros(e_n, e_n);
        for k in 0..self.vertex_dim {
            let block = &self.data[k * e_n * i_n..(k + 1) * e_n * i_n];
            for a in 0..e_n {
                let ra = &block[a * i_n..(a + 1) * i_n];
                for b in a..e_n {
                    let rb = &block[b * i_n..(b + 1) * i_n];
                    g[(a, b)] += ra.iter().zip(rb).map(|(x, y)| x * y).sum::<f64>();
                }
            }
        }
        g.fill_lower_triangle_with_upper_triangle();
        g
    }

    /// `Σ_{k,e} T[k,e,i]·T[k,e,i']`
    fn identity_gram(&self) -> DMatrix<f64> {
        let i_n = self.identities;
        let mut g = DMatrix::zeros(i_n, i_n);
        for row in self.data.chunks_exact(i_n) {
            for a in 0..i_n {
                let x = row[a];
                if x == 0.0 {
                    continue;
                }
                for b in a..i_n {
                    g[(a, b)] += x * row[b];
                }
            }
        }
        g.fill_lower_triangle_with_upper_triangle();
        g
    }

    /// Mode-2 Gram after projecting the identity mode onto `u_id`.
    fn projected_expression_gram(&self, u_id: &DMatrix<f64>) -> DMatrix<f64> {
        let (e_n, i_n, r) = (self.expressions, self.identities, u_id.ncols());
        let mut g = DMatrix::zeros(e_n, e_n);
        let mut proj = DMatrix::zeros(e_n, r);
        for k in 0..self.vertex_dim {
            let block = DMatrix::from_row_slice(e_n, i_n, &self.data[k * e_n * i_n..(k + 1) * e_n * i_n]);
            block.mul_to(u_id, &mut proj);
            g += &proj * proj.transpose();
        }
        g
    }

    /// Mode-3 Gram after projecting the expression mode onto `u_exp`.
    fn projected_identity_gram(&self, u_exp: &DMatrix<f64>) -> DMatrix<f64> {
        let (e_n, i_n, r) = (self.expressions, self.identities, u_exp.ncols());
        let mut g = DMatrix::zeros(i_n, i_n);
        let mut proj = DMatrix::zeros(r, i_n);
        for k in 0..self.vertex_dim {
            let block = DMatrix::from_row_slice(e_n, i_n, &self.data[k * e_n * i_n..(k + 1) * e_n * i_n]);
            u_exp.tr_mul_to(&block, &mut proj);
            g += proj.transpose() * &proj;
        }
        g
    }
}

/// Stacks an identity × expression grid of registered meshes (`grid[i][e]`).
pub fn assemble_tensor(grid: &[Vec<Mesh>], subtract_mean: bool) -> Result<Rank3Tensor> {
    let i_n = grid.len();
    let e_n = grid.first().map_or(0, Vec::len);
    if i_n == 0 || e_n == 0 {
        return Err(Error::IncompleteGrid {
            identity: 0,
            expression: 0,
        });
    }
    for (i, row) in grid.iter().enumerate() {
        if row.len() < e_n {
            return Err(Error::IncompleteGrid {
                identity: i,
                expression: row.len(),
            });
        }
        if row.len() > e_n {
            return Err(Error::IncompleteGrid {
                identity: 0,
                expression: e_n,
            });
        }
    }
    let template = &grid[0][0];
    if grid.iter().flatten().any(|m| !m.same_topology(template)) {
        return Err(Error::TopologyMismatch);
    }
    let n = 3 * template.vertex_count();
    let flat: Vec<Vec<Vec<f64>>> = grid
        .iter()
        .map(|row| row.iter().map(|m| m.flatten()).collect())
        .collect();
    let mut mean = vec![0.0; n];
    if subtract_mean {
        for cell in flat.iter().flatten() {
            for (m, v) in mean.iter_mut().zip(cell) {
                *m += v;
            }
        }
        let count = (i_n * e_n) as f64;
        mean.iter_mut().for_each(|m| *m /= count);
    }
    let mut data = vec![0.0; n * e_n * i_n];
    for (i, row) in flat.iter().enumerate() {
        for (e, cell) in row.iter().enumerate() {
            for k in 0..n {
                data[(k * e_n + e) * i_n + i] = cell[k] - mean[k];
            }
        }
    }
    Ok(Rank3Tensor {
        vertex_dim: n,
        expressions: e_n,
        identities: i_n,
        data,
        mean_shape: mean,
        mean_subtracted: subtract_mean,
        template: template.clone(),
    })
}

/// Leading `r` eigenvectors (descending eigenvalue) with the largest-magnitude
/// entry of each made positive.
fn leading_eigenvectors(gram: DMatrix<f64>, r: usize) -> (DMatrix<f64>, Vec<f64>) {
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut u = DMatrix::zeros(eig.eigenvectors.nrows(), r);
    for (col, &src) in order.iter().take(r).enumerate() {
        let mut v: DVector<f64> = eig.eigenvectors.column(src).into();
        let (imax, _) = v.iter().enumerate().fold(
            (0, -1.0),
            |(bi, bv), (i, x)| if x.abs() > bv { (i, x.abs()) } else { (bi, bv) },
        );
        if v[imax] < 0.0 {
            v = -v;
        }
        u.set_column(col, &v);
    }
    let values = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    (u, values)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TuckerMethod {
    /// Truncated higher-order SVD.
    #[default]
    Hosvd,
    /// HOSVD followed by five rounds of higher-order orthogonal iteration.
    Hooi,
}

/// Truncated Tucker decomposition over the expression and identity modes;
/// the vertex mode is kept whole.
pub fn tucker_decompose(t: &Rank3Tensor, r_id: usize, r_exp: usize, method: TuckerMethod) -> Result<BilinearModel> {
    if r_exp == 0 || r_exp > t.expressions {
        return Err(Error::RankTooLarge {
            requested: r_exp,
            dimension: t.expressions,
        });
    }
    if r_id == 0 || r_id > t.identities {
        return Err(Error::RankTooLarge {
            requested: r_id,
            dimension: t.identities,
        });
    }
    let (mut u_exp, exp_energy) = leading_eigenvectors(t.expression_gram(), r_exp);
    let (mut u_id, id_energy) = leading_eigenvectors(t.identity_gram(), r_id);
    if method == TuckerMethod::Hooi {
        for _ in 0..5 {
            u_exp = leading_eigenvectors(t.projected_expression_gram(&u_id), r_exp).0;
            u_id = leading_eigenvectors(t.projected_identity_gram(&u_exp), r_id).0;
        }
    }

    let (e_n, i_n) = (t.expressions, t.identities);
    let mut core = vec![0.0; t.vertex_dim * r_exp * r_id];
    let mut tmp = DMatrix::zeros(e_n, r_id);
    for k in 0..t.vertex_dim {
        let block = DMatrix::from_row_slice(e_n, i_n, &t.data[k * e_n * i_n..(k + 1) * e_n * i_n]);
        block.mul_to(&u_id, &mut tmp);
        let c = u_exp.transpose() * &tmp;
        for a in 0..r_exp {
            for b in 0..r_id {
                core[(k * r_exp + a) * r_id + b] = c[(a, b)];
            }
        }
    }
    Ok(BilinearModel {
        core,
        exp_basis: u_exp,
        id_basis: u_id,
        mean_shape: t.mean_shape.clone(),
        mean_subtracted: t.mean_subtracted,
        template: t.template.clone(),
        exp_energy,
        id_energy,
    })
}

/// `‖T − C ×₂ U_exp ×₃ U_id‖ / ‖T‖` (0 for a zero tensor).
pub fn relative_reconstruction_error(t: &Rank3Tensor, m: &BilinearModel) -> f64 {
    let (e_n, i_n) = (t.expressions, t.identities);
    let (r_exp, r_id) = (m.r_exp(), m.r_id());
    let mut err = 0.0;
    for k in 0..t.vertex_dim {
        let c = DMatrix::from_row_slice(r_exp, r_id, &m.core[k * r_exp * r_id..(k + 1) * r_exp * r_id]);
        let rec = &m.exp_basis * c * m.id_basis.transpose();
        for e in 0..e_n {
            for i in 0..i_n {
                err += (t.at(k, e, i) - rec[(e, i)]).powi(2);
            }
        }
    }
    let total = t.norm();
    if total == 0.0 {
        0.0
    } else {
        err.sqrt() / total
    }
}
