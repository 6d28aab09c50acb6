use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::TopologyId;
use crate::Mesh;

const MAGIC: &[u8; 4] = b"FSBM";
const VERSION: u32 = 1;

/// Bilinear face model: `V = mean + C ×₂ w_exp ×₃ w_id`.
#[derive(Clone, Debug)]
pub struct BilinearModel {
    /// `3V × r_exp × r_id`, entry `(k, a, b)` at `(k·r_exp + a)·r_id + b`.
    pub core: Vec<f64>,
    /// `E × r_exp`; row `e` is the weight vector of training expression `e`.
    pub exp_basis: DMatrix<f64>,
    /// `I × r_id`; row `i` is the weight vector of training identity `i`.
    pub id_basis: DMatrix<f64>,
    pub mean_shape: Vec<f64>,
    pub mean_subtracted: bool,
    pub template: Mesh,
    /// Mode energies (squared singular values), all of them, descending.
    pub exp_energy: Vec<f64>,
    pub id_energy: Vec<f64>,
}

/// Mean and standard deviation of each basis column over the training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn column_stats(basis: &DMatrix<f64>) -> WeightStats {
    let n = basis.nrows().max(1) as f64;
    let mean: Vec<f64> = basis.column_iter().map(|c| c.sum() / n).collect();
    let std = basis
        .column_iter()
        .zip(&mean)
        .map(|(c, m)| {
            let var = c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            var.sqrt().max(1e-9)
        })
        .collect();
    WeightStats { mean, std }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    magic: String,
    version: u32,
    vertex_dim: usize,
    expressions: usize,
    identities: usize,
    r_id: usize,
    r_exp: usize,
    mean_subtracted: bool,
    topology_id: String,
}

impl BilinearModel {
    pub fn r_id(&self) -> usize {
        self.id_basis.ncols()
    }

    pub fn r_exp(&self) -> usize {
        self.exp_basis.ncols()
    }

    pub fn vertex_dim(&self) -> usize {
        self.mean_shape.len()
    }

    pub fn expressions(&self) -> usize {
        self.exp_basis.nrows()
    }

    pub fn identities(&self) -> usize {
        self.id_basis.nrows()
    }

    pub fn topology_id(&self) -> TopologyId {
        self.template.topology_id()
    }

    pub fn id_stats(&self) -> WeightStats {
        column_stats(&self.id_basis)
    }

    pub fn exp_stats(&self) -> WeightStats {
        column_stats(&self.exp_basis)
    }

    pub fn exp_row(&self, e: usize) -> DVector<f64> {
        self.exp_basis.row(e).transpose()
    }

    pub fn id_row(&self, i: usize) -> DVector<f64> {
        self.id_basis.row(i).transpose()
    }

    fn check(&self, w_id: &[f64], w_exp: &[f64]) -> Result<()> {
        if w_id.len() != self.r_id() {
            return Err(Error::DimensionMismatch {
                expected: self.r_id(),
                got: w_id.len(),
            });
        }
        if w_exp.len() != self.r_exp() {
            return Err(Error::DimensionMismatch {
                expected: self.r_exp(),
                got: w_exp.len(),
            });
        }
        Ok(())
    }

    /// Flattened vertex positions for the given weights.
    pub fn synthesize(&self, w_id: &[f64], w_exp: &[f64]) -> Result<Vec<f64>> {
        self.check(w_id, w_exp)?;
        let (ra, rb) = (self.r_exp(), self.r_id());
        Ok(self
            .mean_shape
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let c = &self.core[k * ra * rb..(k + 1) * ra * rb];
                let mut s = 0.0;
                for (a, we) in w_exp.iter().enumerate() {
                    if *we == 0.0 {
                        continue;
                    }
                    let row = &c[a * rb..(a + 1) * rb];
                    s += we * row.iter().zip(w_id).map(|(x, y)| x * y).sum::<f64>();
                }
                m + s
            })
            .collect())
    }

    pub fn synthesize_mesh(&self, w_id: &[f64], w_exp: &[f64]) -> Result<Mesh> {
        Ok(self.template.with_flat(&self.synthesize(w_id, w_exp)?))
    }

    /// `3V × r_id` matrix `C ×₂ w_exp`: shape offsets are linear in `w_id` through it.
    pub fn contract_exp(&self, w_exp: &[f64]) -> DMatrix<f64> {
        let (ra, rb) = (self.r_exp(), self.r_id());
        DMatrix::from_fn(self.vertex_dim(), rb, |k, b| {
            (0..ra).map(|a| self.core[(k * ra + a) * rb + b] * w_exp[a]).sum()
        })
    }

    /// `3V × r_exp` matrix `C ×₃ w_id`.
    pub fn contract_id(&self, w_id: &[f64]) -> DMatrix<f64> {
        let (ra, rb) = (self.r_exp(), self.r_id());
        DMatrix::from_fn(self.vertex_dim(), ra, |k, a| {
            let row = &self.core[(k * ra + a) * rb..(k * ra + a + 1) * rb];
            row.iter().zip(w_id).map(|(x, y)| x * y).sum()
        })
    }

    /// Writes the binary container and a `.json` manifest next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.vertex_dim() as u32,
            self.expressions() as u32,
            self.identities() as u32,
            self.r_id() as u32,
            self.r_exp() as u32,
            self.mean_subtracted as u32,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let put = |buf: &mut Vec<u8>, xs: &mut dyn Iterator<Item = f64>| {
            for x in xs {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        };
        put(&mut buf, &mut self.mean_shape.iter().copied());
        put(&mut buf, &mut self.core.iter().copied());
        put(&mut buf, &mut row_major(&self.exp_basis).into_iter());
        put(&mut buf, &mut row_major(&self.id_basis).into_iter());
        put(&mut buf, &mut self.exp_energy.iter().copied());
        put(&mut buf, &mut self.id_energy.iter().copied());
        buf.extend_from_slice(&(self.template.face_count() as u32).to_le_bytes());
        for f in self.template.faces() {
            for i in f {
                buf.extend_from_slice(&i.to_le_bytes());
            }
        }
        match self.template.uvs() {
            Some(uvs) => {
                // full precision: UVs feed the topology id
                buf.extend_from_slice(&1u32.to_le_bytes());
                for uv in uvs {
                    buf.extend_from_slice(&uv.x.to_le_bytes());
                    buf.extend_from_slice(&uv.y.to_le_bytes());
                }
            }
            None => buf.extend_from_slice(&0u32.to_le_bytes()),
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        let manifest = Manifest {
            magic: "FSBM".into(),
            version: VERSION,
            vertex_dim: self.vertex_dim(),
            expressions: self.expressions(),
            identities: self.identities(),
            r_id: self.r_id(),
            r_exp: self.r_exp(),
            mean_subtracted: self.mean_subtracted,
            topology_id: self.topology_id().to_string(),
        };
        std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Reads a container written by [`save`](Self::save); values come back at f32 precision.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
                _ => Error::Io(e),
            })?
            .read_to_end(&mut bytes)?;
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(4).ok_or_else(|| bad("truncated"))? != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut header = [0u32; 7];
        for h in header.iter_mut() {
            *h = r.u32().ok_or_else(|| bad("truncated header"))?;
        }
        let [version, n, e_n, i_n, r_id, r_exp, mean_flag] = header.map(|v| v as usize);
        if version as u32 != VERSION {
            return Err(bad("unsupported version"));
        }
        if n % 3 != 0 || r_id > i_n || r_exp > e_n {
            return Err(bad("inconsistent header"));
        }
        let mut floats = |count: usize| r.f32s(count).ok_or_else(|| bad("truncated body"));
        let mean_shape = floats(n)?;
        let core = floats(n * r_exp * r_id)?;
        let exp_basis = DMatrix::from_row_slice(e_n, r_exp, &floats(e_n * r_exp)?);
        let id_basis = DMatrix::from_row_slice(i_n, r_id, &floats(i_n * r_id)?);
        let exp_energy = floats(e_n)?;
        let id_energy = floats(i_n)?;
        let f_n = r.u32().ok_or_else(|| bad("truncated faces"))? as usize;
        let mut faces = Vec::with_capacity(f_n);
        for _ in 0..f_n {
            let mut f = [0u32; 3];
            for x in f.iter_mut() {
                *x = r.u32().ok_or_else(|| bad("truncated faces"))?;
            }
            faces.push(f);
        }
        let uvs = match r.u32().ok_or_else(|| bad("truncated uv flag"))? {
            0 => None,
            _ => {
                let raw = r.take(16 * (n / 3)).ok_or_else(|| bad("truncated uvs"))?;
                let f = |c: &[u8]| f64::from_le_bytes(c.try_into().expect("8 bytes"));
                Some(
                    raw.chunks_exact(16)
                        .map(|c| Vector2::new(f(&c[..8]), f(&c[8..])))
                        .collect(),
                )
            }
        };
        let vertices = mean_shape
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0], c[1], c[2]))
            .collect();
        let template = Mesh::new(vertices, faces, uvs)?;
        Ok(Self {
            core,
            exp_basis,
            id_basis,
            mean_shape,
            mean_subtracted: mean_flag != 0,
            template,
            exp_energy,
            id_energy,
        })
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn f32s(&mut self, count: usize) -> Option<Vec<f64>> {
        let s = self.take(count.checked_mul(4)?)?;
        Some(
            s.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        )
    }
}
