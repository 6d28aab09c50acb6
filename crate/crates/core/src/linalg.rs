//! Sparse symmetric solves shared by registration and deformation transfer.

use std::sync::Once;

use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Par, Side};

use crate::error::{Error, Result};

/// Accumulates a sparse symmetric matrix; duplicate entries are summed in insertion order.
#[derive(Clone, Debug, Default)]
pub struct SparseBuilder {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SparseBuilder {
    pub fn new(n: usize) -> Self {
        Self { n, entries: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn add(&mut self, row: usize, col: usize, v: f64) {
        if v != 0.0 {
            self.entries.push((row, col, v));
        }
    }

    /// Adds `w·aᵀa` for a sparse row `a` given as `(index, coefficient)` pairs.
    pub fn add_outer(&mut self, row: &[(usize, f64)], w: f64) {
        for &(i, a) in row {
            for &(j, b) in row {
                self.add(i, j, w * a * b);
            }
        }
    }

    /// Cholesky solve of `A·X = B` for a symmetric positive definite `A`.
    pub fn solve(&self, rhs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let factor = self.factorize()?;
        factor.solve(rhs)
    }

    pub fn factorize(&self) -> Result<SparseCholesky> {
        deterministic();
        let mut sorted = self.entries.clone();
        sorted.sort_by_key(|&(r, c, _)| (c, r));
        let mut triplets: Vec<Triplet<usize, usize, f64>> = Vec::with_capacity(sorted.len());
        for (r, c, v) in sorted {
            match triplets.last_mut() {
                Some(t) if t.row == r && t.col == c => t.val += v,
                _ => triplets.push(Triplet::new(r, c, v)),
            }
        }
        let a = SparseColMat::<usize, f64>::try_new_from_triplets(self.n, self.n, &triplets)
            .map_err(|e| Error::Solver(format!("{e:?}")))?;
        let llt = a
            .as_ref()
            .sp_cholesky(Side::Lower)
            .map_err(|e| Error::Solver(format!("cholesky: {e:?}")))?;
        Ok(SparseCholesky { n: self.n, a, llt })
    }
}

pub struct SparseCholesky {
    n: usize,
    a: SparseColMat<usize, f64>,
    llt: faer::sparse::linalg::solvers::Llt<usize, f64>,
}

/// Relative residual every accepted solve must meet.
pub const SOLVE_RESIDUAL: f64 = 1e-10;

impl SparseCholesky {
    pub fn solve(&self, rhs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        use faer::prelude::Solve;
        let b = Mat::<f64>::from_fn(self.n, rhs.len(), |i, j| rhs[j][i]);
        let mut x = self.llt.solve(&b);
        // one step of iterative refinement keeps the residual well under the gate
        let r = &b - &self.a * &x;
        let dx = self.llt.solve(&r);
        x += &dx;
        let r = &b - &self.a * &x;
        for j in 0..rhs.len() {
            let bn: f64 = (0..self.n).map(|i| b[(i, j)] * b[(i, j)]).sum::<f64>().sqrt();
            let rn: f64 = (0..self.n).map(|i| r[(i, j)] * r[(i, j)]).sum::<f64>().sqrt();
            if !rn.is_finite() || rn > SOLVE_RESIDUAL * bn.max(1e-300) && rn > 1e-300 {
                return Err(Error::Solver(format!("residual {:.3e} relative", rn / bn.max(1e-300))));
            }
        }
        Ok((0..rhs.len())
            .map(|j| (0..self.n).map(|i| x[(i, j)]).collect())
            .collect())
    }
}

fn deterministic() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| faer::set_global_parallelism(Par::Seq));
}
