use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen, Vector3};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FALB";
const VERSION: u32 = 1;

/// Per-vertex RGB albedo as a PCA model.
#[derive(Clone, Debug, PartialEq)]
pub struct AlbedoModel {
    /// `3V` interleaved RGB.
    pub mean: Vec<f64>,
    /// `3V × K`, orthonormal columns.
    pub basis: DMatrix<f64>,
    /// Standard deviation of each component's coefficient.
    pub stddev: Vec<f64>,
}

impl AlbedoModel {
    pub fn vertex_count(&self) -> usize {
        self.mean.len() / 3
    }

    pub fn components(&self) -> usize {
        self.basis.ncols()
    }

    /// Per-vertex albedo for coefficients `w` (length `K`).
    pub fn albedo(&self, w: &[f64]) -> Result<Vec<Vector3<f64>>> {
        if w.len() != self.components() {
            return Err(Error::DimensionMismatch {
                expected: self.components(),
                got: w.len(),
            });
        }
        let mut flat = self.mean.clone();
        for (k, wk) in w.iter().enumerate() {
            if *wk != 0.0 {
                for (f, b) in flat.iter_mut().zip(self.basis.column(k).iter()) {
                    *f += wk * b;
                }
            }
        }
        Ok(flat.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect())
    }

    /// PCA of flattened per-vertex albedo samples, keeping `k` components.
    pub fn from_samples(samples: &[Vec<f64>], k: usize) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::Invalid("albedo PCA needs at least two samples".into()));
        }
        let dim = samples[0].len();
        if dim == 0 || dim % 3 != 0 || samples.iter().any(|s| s.len() != dim) {
            return Err(Error::Invalid("albedo samples must share a 3V length".into()));
        }
        if k == 0 || k > n - 1 {
            return Err(Error::RankTooLarge {
                requested: k,
                dimension: n - 1,
            });
        }
        let mean: Vec<f64> = (0..dim)
            .map(|j| samples.iter().map(|s| s[j]).sum::<f64>() / n as f64)
            .collect();
        let centered = DMatrix::from_fn(dim, n, |j, i| samples[i][j] - mean[j]);
        let gram = centered.tr_mul(&centered);
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut basis = DMatrix::zeros(dim, k);
        let mut stddev = Vec::with_capacity(k);
        for (c, &i) in order.iter().take(k).enumerate() {
            let lambda = eig.eigenvalues[i].max(0.0);
            if lambda <= 1e-24 {
                return Err(Error::RankDeficient("albedo samples"));
            }
            let mut col = &centered * eig.eigenvectors.column(i);
            col /= lambda.sqrt();
            // deterministic sign: largest-magnitude entry positive
            if col[col.iamax()] < 0.0 {
                col = -col;
            }
            basis.set_column(c, &col);
            stddev.push((lambda / (n - 1) as f64).sqrt());
        }
        Ok(Self { mean, basis, stddev })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.mean.len() as u32, self.components() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let all = self.mean.iter().chain(self.basis.iter()).chain(&self.stddev);
        for v in all {
            out.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing FALB header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        if word(0) != VERSION as usize {
            return Err(bad("unsupported version"));
        }
        let (dim, k) = (word(1), word(2));
        let count = dim + dim * k + k;
        if bytes.len() != 16 + 8 * count {
            return Err(bad("truncated payload"));
        }
        let vals: Vec<f64> = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            mean: vals[..dim].to_vec(),
            basis: DMatrix::from_column_slice(dim, k, &vals[dim..dim + dim * k]),
            stddev: vals[dim + dim * k..].to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn samples(seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dirs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..30).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        (0..12)
            .map(|_| {
                let w: Vec<f64> = (0..3).map(|j| rng.random_range(-1.0..1.0) * (3 - j) as f64).collect();
                (0..30)
                    .map(|i| 0.5 + 0.05 * (0..3).map(|j| w[j] * dirs[j][i]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn pca_basis_is_orthonormal_and_spans_samples() {
        let s = samples(1);
        let m = AlbedoModel::from_samples(&s, 3).unwrap();
        let gram = m.basis.tr_mul(&m.basis);
        assert!((gram - DMatrix::identity(3, 3)).amax() < 1e-10);
        assert!(m.stddev.windows(2).all(|w| w[0] >= w[1]));
        for x in &s {
            let centered: Vec<f64> = x.iter().zip(&m.mean).map(|(a, b)| a - b).collect();
            let w: Vec<f64> = (0..3)
                .map(|k| m.basis.column(k).iter().zip(&centered).map(|(a, b)| a * b).sum())
                .collect();
            let rec = m.albedo(&w).unwrap();
            for (v, c) in rec.iter().zip(x.chunks_exact(3)) {
                assert!((v - Vector3::new(c[0], c[1], c[2])).amax() < 1e-10);
            }
        }
    }

    #[test]
    fn round_trip_and_errors() {
        let m = AlbedoModel::from_samples(&samples(2), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("albedo.falb");
        m.save(&p).unwrap();
        assert_eq!(AlbedoModel::load(&p).unwrap(), m);
        assert!(matches!(
            AlbedoModel::from_samples(&samples(2), 12),
            Err(Error::RankTooLarge { .. })
        ));
        assert!(matches!(m.albedo(&[0.0]), Err(Error::DimensionMismatch { .. })));
        std::fs::write(&p, b"FALBxx").unwrap();
        assert!(matches!(AlbedoModel::load(&p), Err(Error::Format { .. })));
    }
}
