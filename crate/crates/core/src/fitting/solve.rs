use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{debug, warn};
use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::energy::{
    landmark_energy, landmark_jacobian, norm_term, pixel_energy_fixed, synthesize_samples, visible_samples,
    NormalField, PixelSamples,
};
use super::AlbedoModel;
use crate::error::{Error, Result};
use crate::mesh::normalize;
use crate::morphable::BilinearModel;
use crate::registration::LandmarkSet;
use crate::render::{sh_irradiance, sh_shade_jacobian, CameraPose, LinearImage, Sh9};
use crate::Mesh;

const IRLS_FLOOR: f64 = 1e-4;
const LM_TRIALS: usize = 10;
const WEIGHTS_MAGIC: &[u8; 4] = b"FWTS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Photometric term weight (λ1).
    pub lambda_pixel: f64,
    /// Identity prior weight (λ2).
    pub lambda_id: f64,
    /// Expression prior weight (λ3).
    pub lambda_exp: f64,
    /// Albedo prior weight (λ4).
    pub lambda_alb: f64,
    pub max_outer_iterations: usize,
    /// Stop once an outer iteration lowers the energy by less than this fraction.
    pub rel_tolerance: f64,
    /// Free identity, expression and albedo weights (capped by the model ranks).
    pub n_id: usize,
    pub n_exp: usize,
    pub n_alb: usize,
    /// Squared per-pixel distance instead of the plain L2 norm.
    pub squared_pixel_norm: bool,
    /// Gauss-Newton steps on the landmark block per outer iteration.
    pub landmark_steps: usize,
    /// Joint Gauss-Newton steps per outer iteration.
    pub full_steps: usize,
    /// Pixel budget for the approximate Hessians; samples are strided beyond it.
    pub max_system_pixels: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lambda_pixel: 1e-3,
            lambda_id: 1e-2,
            lambda_exp: 1e-2,
            lambda_alb: 1e-2,
            max_outer_iterations: 8,
            rel_tolerance: 1e-6,
            n_id: 50,
            n_exp: 52,
            n_alb: 100,
            squared_pixel_norm: false,
            landmark_steps: 5,
            full_steps: 2,
            max_system_pixels: 4000,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_pixel, self.lambda_id, self.lambda_exp, self.lambda_alb];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Invalid("fit weights must be finite and nonnegative".into()));
        }
        if self.max_outer_iterations == 0 || self.n_id == 0 || self.n_exp == 0 || self.max_system_pixels == 0 {
            return Err(Error::Invalid("iteration and parameter counts must be positive".into()));
        }
        if !(self.rel_tolerance >= 0.0) {
            return Err(Error::Invalid("rel_tolerance must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Every quantity `fit_image` optimizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitState {
    pub pose: CameraPose,
    pub w_id: Vec<f64>,
    pub w_exp: Vec<f64>,
    pub w_alb: Vec<f64>,
    pub sh: Sh9<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyTerms {
    pub landmark: f64,
    pub pixel: f64,
    pub id: f64,
    pub exp: f64,
    pub alb: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub pose: CameraPose,
    pub w_id: Vec<f64>,
    pub w_exp: Vec<f64>,
    pub w_alb: Vec<f64>,
    pub sh: Sh9<f64>,
    /// Initial energy, then one entry per outer iteration.
    pub energy_trace: Vec<EnergyTerms>,
    /// Landmark vertices after contour re-selection.
    pub landmark_vertex_ids: Vec<u32>,
    pub iterations: usize,
    /// The last outer iteration found no step that lowered the energy.
    pub line_search_exhausted: bool,
}

#[derive(Serialize, Deserialize)]
struct FitResultFile {
    pose: CameraPose,
    sh: Sh9<f64>,
    energy_trace: Vec<EnergyTerms>,
    landmark_vertex_ids: Vec<u32>,
    iterations: usize,
    line_search_exhausted: bool,
    weights_blob: String,
    weight_counts: [usize; 3],
}

fn weights_path(json: &Path) -> PathBuf {
    json.with_extension("weights.bin")
}

impl FitResult {
    pub fn state(&self) -> FitState {
        FitState {
            pose: self.pose,
            w_id: self.w_id.clone(),
            w_exp: self.w_exp.clone(),
            w_alb: self.w_alb.clone(),
            sh: self.sh,
        }
    }

    pub fn final_energy(&self) -> Option<EnergyTerms> {
        self.energy_trace.last().copied()
    }

    /// Writes `path` (JSON) and the weight vectors to a sibling `.weights.bin`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let blob = weights_path(path);
        let file = FitResultFile {
            pose: self.pose,
            sh: self.sh,
            energy_trace: self.energy_trace.clone(),
            landmark_vertex_ids: self.landmark_vertex_ids.clone(),
            iterations: self.iterations,
            line_search_exhausted: self.line_search_exhausted,
            weights_blob: blob
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            weight_counts: [self.w_id.len(), self.w_exp.len(), self.w_alb.len()],
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        let mut bytes = WEIGHTS_MAGIC.to_vec();
        for n in file.weight_counts {
            bytes.extend_from_slice(&(n as u32).to_le_bytes());
        }
        for v in self.w_id.iter().chain(&self.w_exp).chain(&self.w_alb) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(blob, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let file: FitResultFile = serde_json::from_str(&text)?;
        let blob_path = path.with_file_name(&file.weights_blob);
        let bytes = std::fs::read(&blob_path).map_err(|_| Error::NotFound(blob_path.clone()))?;
        let bad = || Error::Format {
            path: blob_path.clone(),
            reason: "weights blob does not match its header".into(),
        };
        if bytes.len() < 16 || &bytes[..4] != WEIGHTS_MAGIC {
            return Err(bad());
        }
        let counts: Vec<usize> = (0..3)
            .map(|i| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
            .collect();
        if counts != file.weight_counts || bytes.len() != 16 + 8 * counts.iter().sum::<usize>() {
            return Err(bad());
        }
        let vals: Vec<f64> = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (a, b) = (counts[0], counts[0] + counts[1]);
        Ok(Self {
            pose: file.pose,
            w_id: vals[..a].to_vec(),
            w_exp: vals[a..b].to_vec(),
            w_alb: vals[b..].to_vec(),
            sh: file.sh,
            energy_trace: file.energy_trace,
            landmark_vertex_ids: file.landmark_vertex_ids,
            iterations: file.iterations,
            line_search_exhausted: file.line_search_exhausted,
        })
    }
}

/// Weak-perspective pose from 2D–3D correspondences: affine camera by least
/// squares, then the nearest scaled rotation.
pub fn init_pose(points3d: &[Vector3<f64>], points2d: &[Vector2<f64>]) -> Result<CameraPose> {
    if points3d.len() != points2d.len() {
        return Err(Error::DimensionMismatch {
            expected: points3d.len(),
            got: points2d.len(),
        });
    }
    if points3d.len() < 6 {
        return Err(Error::PoseInitFailed(format!(
            "{} landmarks, need at least 6",
            points3d.len()
        )));
    }
    let n = points3d.len() as f64;
    let xm = points3d.iter().sum::<Vector3<f64>>() / n;
    let pm = points2d.iter().sum::<Vector2<f64>>() / n;
    let mut xtx = Matrix3::zeros();
    let mut xtp = nalgebra::Matrix3x2::zeros();
    for (x, p) in points3d.iter().zip(points2d) {
        let (dx, dp) = (x - xm, p - pm);
        xtx += dx * dx.transpose();
        xtp += dx * dp.transpose();
    }
    let eig = xtx.symmetric_eigen();
    let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    if !(hi > 0.0) || lo < 1e-10 * hi {
        return Err(Error::PoseInitFailed(
            "landmark vertices are coplanar or collinear".into(),
        ));
    }
    let m = xtx
        .try_inverse()
        .ok_or_else(|| Error::PoseInitFailed("singular landmark moments".into()))?
        * xtp;
    let a = m.transpose();
    let svd = a.svd(true, true);
    let (s1, s2) = (
        svd.singular_values[0].max(svd.singular_values[1]),
        svd.singular_values[0].min(svd.singular_values[1]),
    );
    if !(s1 > 0.0) || s2 < 1e-6 * s1 {
        return Err(Error::PoseInitFailed("projected landmarks are degenerate".into()));
    }
    let r12 = svd.u.expect("u") * svd.v_t.expect("v");
    let r1 = Vector3::new(r12[(0, 0)], r12[(0, 1)], r12[(0, 2)]);
    let r2 = Vector3::new(r12[(1, 0)], r12[(1, 1)], r12[(1, 2)]);
    let r = Matrix3::from_rows(&[r1.transpose(), r2.transpose(), r1.cross(&r2).transpose()]);
    let s = 0.5 * (s1 + s2);
    let y = r * xm;
    Ok(CameraPose {
        s,
        r,
        t: pm - Vector2::new(y.x, y.y) * s,
    })
}

struct Problem<'a> {
    m: &'a BilinearModel,
    alb: &'a AlbedoModel,
    image: &'a LinearImage,
    cfg: &'a FitConfig,
    points: Vec<Vector2<f64>>,
    ids: Vec<u32>,
    contour: Vec<bool>,
    /// Shape priors are Gaussians centered on the training-row means.
    id_mean: Vec<f64>,
    id_std: Vec<f64>,
    exp_mean: Vec<f64>,
    exp_std: Vec<f64>,
    n_id: usize,
    n_exp: usize,
    n_alb: usize,
    /// Each edge with its one or two incident faces.
    edges: Vec<(u32, u32, u32, Option<u32>)>,
}

fn vec3(flat: &[f64], v: usize) -> Vector3<f64> {
    Vector3::new(flat[3 * v], flat[3 * v + 1], flat[3 * v + 2])
}

impl<'a> Problem<'a> {
    fn landmarks(&self) -> LandmarkSet {
        LandmarkSet {
            points2d: Some(self.points.clone()),
            points3d: None,
            semantic_ids: (0..self.ids.len() as u32).collect(),
            template_vertex_ids: self.ids.clone(),
            contour: self.contour.clone(),
        }
    }

    fn pose_len(&self) -> usize {
        6
    }

    fn shape_len(&self) -> usize {
        self.n_id + self.n_exp
    }

    fn full_len(&self) -> usize {
        6 + self.shape_len() + self.n_alb + 27
    }

    fn mesh(&self, st: &FitState) -> Option<Mesh> {
        self.m.synthesize_mesh(&st.w_id, &st.w_exp).ok()
    }

    fn regularizers(&self, st: &FitState) -> [f64; 3] {
        let reg = |w: &[f64], mu: &[f64], s: &[f64]| {
            w.iter()
                .zip(mu)
                .zip(s)
                .map(|((x, m), s)| ((x - m) / s).powi(2))
                .sum::<f64>()
        };
        [
            reg(&st.w_id, &self.id_mean, &self.id_std),
            reg(&st.w_exp, &self.exp_mean, &self.exp_std),
            reg(&st.w_alb, &vec![0.0; st.w_alb.len()], &self.alb.stddev),
        ]
    }

    fn landmark_value(&self, st: &FitState, flat: &[f64]) -> f64 {
        let n = self.points.len() as f64;
        self.ids
            .iter()
            .zip(&self.points)
            .map(|(&v, p)| (st.pose.project(&vec3(flat, v as usize)) - p).norm_squared())
            .sum::<f64>()
            / n
    }

    fn pixel_value(&self, mesh: &Mesh, st: &FitState) -> Option<(f64, PixelSamples)> {
        let samples = visible_samples(mesh, &st.pose, self.image).ok()?;
        let albedo = self.alb.albedo(&st.w_alb).ok()?;
        let synth = synthesize_samples(mesh, &albedo, &st.sh, &samples);
        let e = synth
            .iter()
            .zip(&samples.targets)
            .map(|(a, b)| norm_term(&(a - b), self.cfg.squared_pixel_norm).0)
            .sum::<f64>()
            / samples.len() as f64;
        Some((e, samples))
    }

    /// All energy terms; `None` when the face leaves the image.
    fn terms(&self, st: &FitState) -> Option<EnergyTerms> {
        if !(st.pose.s > 0.0) {
            return None;
        }
        let mesh = self.mesh(st)?;
        let landmark = self.landmark_value(st, &mesh.flatten());
        let (pixel, _) = self.pixel_value(&mesh, st)?;
        let [id, exp, alb] = self.regularizers(st);
        let c = self.cfg;
        let total = landmark + c.lambda_pixel * pixel + c.lambda_id * id + c.lambda_exp * exp + c.lambda_alb * alb;
        total.is_finite().then_some(EnergyTerms {
            landmark,
            pixel,
            id,
            exp,
            alb,
            total,
        })
    }

    /// Applies a parameter increment laid out as `[s, ω, t | w_id | w_exp | w_alb | sh]`.
    fn apply(&self, st: &FitState, d: &[f64]) -> FitState {
        let mut out = st.clone();
        out.pose.s += d[0];
        out.pose = out.pose.rotated(&Vector3::new(d[1], d[2], d[3]));
        out.pose.t += Vector2::new(d[4], d[5]);
        let mut o = 6;
        for k in 0..self.n_id {
            out.w_id[k] += d[o + k];
        }
        o += self.n_id;
        for k in 0..self.n_exp {
            out.w_exp[k] += d[o + k];
        }
        o += self.n_exp;
        if d.len() > o {
            for k in 0..self.n_alb {
                out.w_alb[k] += d[o + k];
            }
            o += self.n_alb;
            let mut flat = out.sh.flat();
            for (k, f) in flat.iter_mut().enumerate() {
                *f += d[o + k];
            }
            out.sh = Sh9::from_flat(&flat);
        }
        out
    }

    /// Landmark Gauss-Newton system over pose and shape, with the shape priors.
    fn landmark_system(&self, st: &FitState) -> Option<(DMatrix<f64>, DVector<f64>)> {
        let flat = self.m.synthesize(&st.w_id, &st.w_exp).ok()?;
        let p = self.pose_len() + self.shape_len();
        let l = self.points.len();
        let mut j = DMatrix::zeros(2 * l, p);
        let mut r = DVector::zeros(2 * l);
        for (i, (&v, pt)) in self.ids.iter().zip(&self.points).enumerate() {
            let x = vec3(&flat, v as usize);
            let res = st.pose.project(&x) - pt;
            r[2 * i] = res.x;
            r[2 * i + 1] = res.y;
            let (jp, jid, jexp) = landmark_jacobian(self.m, st, &x, v as usize);
            j.view_mut((2 * i, 0), (2, 6)).copy_from(&jp);
            j.view_mut((2 * i, 6), (2, self.n_id))
                .copy_from(&jid.columns(0, self.n_id));
            j.view_mut((2 * i, 6 + self.n_id), (2, self.n_exp))
                .copy_from(&jexp.columns(0, self.n_exp));
        }
        let scale = 2.0 / l as f64;
        let mut h = j.tr_mul(&j) * scale;
        let mut g = j.tr_mul(&r) * scale;
        self.add_shape_prior(st, &mut h, &mut g);
        Some((h, g))
    }

    fn add_shape_prior(&self, st: &FitState, h: &mut DMatrix<f64>, g: &mut DVector<f64>) {
        let c = self.cfg;
        for k in 0..self.n_id {
            let i = 6 + k;
            let s2 = self.id_std[k].powi(2);
            h[(i, i)] += 2.0 * c.lambda_id / s2;
            g[i] += 2.0 * c.lambda_id * (st.w_id[k] - self.id_mean[k]) / s2;
        }
        for k in 0..self.n_exp {
            let i = 6 + self.n_id + k;
            let s2 = self.exp_std[k].powi(2);
            h[(i, i)] += 2.0 * c.lambda_exp / s2;
            g[i] += 2.0 * c.lambda_exp * (st.w_exp[k] - self.exp_mean[k]) / s2;
        }
    }

    /// IRLS weight of one pixel so that `λ1·Σ a‖r‖²` majorizes the photometric term.
    fn irls_weight(&self, r: &Vector3<f64>, count: usize) -> f64 {
        if self.cfg.squared_pixel_norm {
            1.0 / count as f64
        } else {
            1.0 / (2.0 * count as f64 * r.norm().max(IRLS_FLOOR))
        }
    }

    /// Joint Gauss-Newton system over every free parameter; the photometric
    /// block is linearized at fixed visibility.
    fn full_system(&self, st: &FitState) -> Option<(DMatrix<f64>, DVector<f64>)> {
        let c = self.cfg;
        let mesh = self.mesh(st)?;
        let samples = visible_samples(&mesh, &st.pose, self.image).ok()?;
        let p = self.full_len();
        let (o_alb, o_sh) = (6 + self.shape_len(), 6 + self.shape_len() + self.n_alb);

        // exact gradient
        let lan = landmark_energy(self.m, st, &self.landmarks()).ok()?;
        let pix = pixel_energy_fixed(self.m, self.alb, st, &samples, c.squared_pixel_norm).ok()?;
        let mut g = DVector::zeros(p);
        g[0] = lan.pose.s;
        for k in 0..3 {
            g[1 + k] = lan.pose.omega[k];
        }
        g[4] = lan.pose.t.x;
        g[5] = lan.pose.t.y;
        for k in 0..self.n_id {
            g[6 + k] = lan.w_id[k] + c.lambda_pixel * pix.w_id[k];
        }
        for k in 0..self.n_exp {
            g[6 + self.n_id + k] = lan.w_exp[k] + c.lambda_pixel * pix.w_exp[k];
        }
        for k in 0..self.n_alb {
            let s2 = self.alb.stddev[k].powi(2);
            g[o_alb + k] = c.lambda_pixel * pix.w_alb[k] + 2.0 * c.lambda_alb * st.w_alb[k] / s2;
        }
        for k in 0..27 {
            g[o_sh + k] = c.lambda_pixel * pix.sh[k];
        }

        let mut h = DMatrix::zeros(p, p);
        let (hl, _) = self.landmark_system(st)?;
        let pl = hl.nrows();
        h.view_mut((0, 0), (pl, pl)).copy_from(&hl);
        for k in 0..self.n_alb {
            h[(o_alb + k, o_alb + k)] += 2.0 * c.lambda_alb / self.alb.stddev[k].powi(2);
        }
        // the landmark system already carries the shape priors; add their gradient once
        for k in 0..self.n_id {
            g[6 + k] += 2.0 * c.lambda_id * (st.w_id[k] - self.id_mean[k]) / self.id_std[k].powi(2);
        }
        for k in 0..self.n_exp {
            g[6 + self.n_id + k] += 2.0 * c.lambda_exp * (st.w_exp[k] - self.exp_mean[k]) / self.exp_std[k].powi(2);
        }

        if c.lambda_pixel > 0.0 {
            self.add_pixel_hessian(st, &mesh, &samples, &mut h);
        }
        Some((h, g))
    }

    fn add_pixel_hessian(&self, st: &FitState, mesh: &Mesh, samples: &PixelSamples, h: &mut DMatrix<f64>) {
        let c = self.cfg;
        let p = self.full_len();
        let (o_alb, o_sh) = (6 + self.shape_len(), 6 + self.shape_len() + self.n_alb);
        let stride = samples.len().div_ceil(c.max_system_pixels).max(1);
        let sub = samples.strided(stride);
        let albedo = match self.alb.albedo(&st.w_alb) {
            Ok(a) => a,
            Err(_) => return,
        };
        let field = NormalField::new(mesh);
        let cid = self.m.contract_exp(&st.w_exp);
        let cexp = self.m.contract_id(&st.w_id);
        let dn: Vec<Vec<Vector3<f64>>> = (0..self.n_id)
            .map(|k| field.forward(mesh, cid.column(k).as_slice()))
            .chain((0..self.n_exp).map(|k| field.forward(mesh, cexp.column(k).as_slice())))
            .collect();
        let synth = synthesize_samples(mesh, &albedo, &st.sh, &sub);
        const CHUNK: usize = 256;
        for start in (0..sub.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(sub.len());
            let mut j = DMatrix::zeros(3 * (end - start), p);
            for q in start..end {
                let row = 3 * (q - start);
                let idx = mesh.faces()[sub.faces[q] as usize].map(|i| i as usize);
                let b = sub.barycentric[q];
                let r = synth[q] - sub.targets[q];
                let w = (2.0 * c.lambda_pixel * self.irls_weight(&r, samples.len()) * stride as f64).sqrt();
                let n_raw = field.unit[idx[0]] * b[0] + field.unit[idx[1]] * b[1] + field.unit[idx[2]] * b[2];
                let len = n_raw.norm();
                let n = normalize(&n_raw);
                let rho = albedo[idx[0]] * b[0] + albedo[idx[1]] * b[1] + albedo[idx[2]] * b[2];
                let irr = sh_irradiance(&n, &st.sh);
                let (jac, factors) = sh_shade_jacobian(&n, &st.sh);
                for (k, dnk) in dn.iter().enumerate() {
                    let d_raw = dnk[idx[0]] * b[0] + dnk[idx[1]] * b[1] + dnk[idx[2]] * b[2];
                    if len == 0.0 {
                        continue;
                    }
                    let d = (d_raw - n * n.dot(&d_raw)) / len;
                    for ch in 0..3 {
                        if irr[ch] > 0.0 {
                            let ds = jac[(ch, 0)] * d.x + jac[(ch, 1)] * d.y + jac[(ch, 2)] * d.z;
                            j[(row + ch, 6 + k)] = w * rho[ch] * ds;
                        }
                    }
                }
                for ch in 0..3 {
                    let shade = irr[ch].max(0.0);
                    for k in 0..self.n_alb {
                        let col = self.alb.basis.column(k);
                        let v = b[0] * col[3 * idx[0] + ch] + b[1] * col[3 * idx[1] + ch] + b[2] * col[3 * idx[2] + ch];
                        j[(row + ch, o_alb + k)] = w * shade * v;
                    }
                    if irr[ch] > 0.0 {
                        for k in 0..9 {
                            j[(row + ch, o_sh + 9 * ch + k)] = w * rho[ch] * factors[k];
                        }
                    }
                }
            }
            *h += j.tr_mul(&j);
        }
    }

    /// Damped Gauss-Newton step accepted only when the total energy drops.
    fn lm_step(&self, st: &mut FitState, e: &mut f64, h: &DMatrix<f64>, g: &DVector<f64>, mu: &mut f64) -> bool {
        let n = h.nrows();
        let max_diag = (0..n).map(|i| h[(i, i)]).fold(0.0, f64::max).max(1e-12);
        for _ in 0..LM_TRIALS {
            let mut a = h.clone();
            for i in 0..n {
                a[(i, i)] += *mu * h[(i, i)].max(1e-9 * max_diag) + 1e-12 * max_diag;
            }
            let Some(chol) = a.cholesky() else {
                *mu *= 4.0;
                continue;
            };
            let d = chol.solve(&(-g));
            let mut full = vec![0.0; self.full_len()];
            full[..n].copy_from_slice(d.as_slice());
            let cand = self.apply(st, &full);
            if let Some(t) = self.terms(&cand) {
                if t.total < *e {
                    *st = cand;
                    *e = t.total;
                    *mu = (*mu / 3.0).max(1e-10);
                    return true;
                }
            }
            *mu *= 4.0;
        }
        *mu = mu.min(1e6);
        false
    }

    /// Lighting, then albedo, by weighted linear least squares at fixed geometry.
    fn appearance_step(&self, st: &mut FitState, e: &mut f64) -> bool {
        let c = self.cfg;
        if c.lambda_pixel == 0.0 {
            return false;
        }
        let Some(mesh) = self.mesh(st) else { return false };
        let Some((_, samples)) = self.pixel_value(&mesh, st) else {
            return false;
        };
        let stride = samples.len().div_ceil(c.max_system_pixels).max(1);
        let sub = samples.strided(stride);
        let Ok(albedo) = self.alb.albedo(&st.w_alb) else {
            return false;
        };
        let normals = NormalField::new(&mesh);
        let synth = synthesize_samples(&mesh, &albedo, &st.sh, &sub);
        let weights: Vec<f64> = synth
            .iter()
            .zip(&sub.targets)
            .map(|(s, t)| self.irls_weight(&(s - t), samples.len()) * stride as f64)
            .collect();
        let geo: Vec<(Vector3<f64>, [usize; 3])> = sub
            .faces
            .iter()
            .zip(&sub.barycentric)
            .map(|(&f, b)| {
                let idx = mesh.faces()[f as usize].map(|i| i as usize);
                let n = normalize(
                    &(normals.unit[idx[0]] * b[0] + normals.unit[idx[1]] * b[1] + normals.unit[idx[2]] * b[2]),
                );
                (n, idx)
            })
            .collect();

        // lighting per channel
        let mut light = st.sh;
        for ch in 0..3 {
            let mut a = DMatrix::<f64>::zeros(9, 9);
            let mut rhs = DVector::<f64>::zeros(9);
            for (q, (n, idx)) in geo.iter().enumerate() {
                let b = sub.barycentric[q];
                let rho = albedo[idx[0]][ch] * b[0] + albedo[idx[1]][ch] * b[1] + albedo[idx[2]][ch] * b[2];
                let (_, f) = sh_shade_jacobian(n, &st.sh);
                let row = DVector::from_fn(9, |k, _| rho * f[k]);
                a += &row * row.transpose() * weights[q];
                rhs += row * (weights[q] * sub.targets[q][ch]);
            }
            let ridge = 1e-12 * a.trace().max(1e-300);
            for k in 0..9 {
                a[(k, k)] += ridge;
            }
            if let Some(sol) = a.cholesky().map(|ch| ch.solve(&rhs)) {
                light.coeffs[ch].copy_from_slice(sol.as_slice());
            }
        }
        let mut improved = false;
        let mut cand = st.clone();
        cand.sh = light;
        if let Some(t) = self.terms(&cand) {
            if t.total < *e {
                *st = cand;
                *e = t.total;
                improved = true;
            }
        }

        // albedo at the accepted lighting
        if self.n_alb > 0 {
            let k_free = self.n_alb;
            let mut a = DMatrix::<f64>::zeros(k_free, k_free);
            let mut rhs = DVector::<f64>::zeros(k_free);
            let mut fixed = st.w_alb.clone();
            fixed[..k_free].iter_mut().for_each(|w| *w = 0.0);
            let Ok(base) = self.alb.albedo(&fixed) else {
                return improved;
            };
            let mut row = DVector::<f64>::zeros(k_free);
            for (q, (n, idx)) in geo.iter().enumerate() {
                let b = sub.barycentric[q];
                let irr = sh_irradiance(n, &st.sh);
                for ch in 0..3 {
                    let shade = irr[ch].max(0.0);
                    if shade == 0.0 {
                        continue;
                    }
                    for k in 0..k_free {
                        let col = self.alb.basis.column(k);
                        row[k] = shade
                            * (b[0] * col[3 * idx[0] + ch] + b[1] * col[3 * idx[1] + ch] + b[2] * col[3 * idx[2] + ch]);
                    }
                    let b0 = base[idx[0]][ch] * b[0] + base[idx[1]][ch] * b[1] + base[idx[2]][ch] * b[2];
                    let target = sub.targets[q][ch] - shade * b0;
                    a.ger(c.lambda_pixel * weights[q], &row, &row, 1.0);
                    rhs.axpy(c.lambda_pixel * weights[q] * target, &row, 1.0);
                }
            }
            for k in 0..k_free {
                a[(k, k)] += c.lambda_alb / self.alb.stddev[k].powi(2) + 1e-12;
            }
            if let Some(sol) = a.cholesky().map(|ch| ch.solve(&rhs)) {
                let mut cand = st.clone();
                cand.w_alb[..k_free].copy_from_slice(sol.as_slice());
                if let Some(t) = self.terms(&cand) {
                    if t.total < *e {
                        *st = cand;
                        *e = t.total;
                        improved = true;
                    }
                }
            }
        }
        improved
    }

    /// Moves each contour landmark to the silhouette vertex nearest its 2D point,
    /// keeping the current vertex when that is nearer.
    fn reselect_contour(&mut self, st: &FitState) {
        if !self.contour.iter().any(|&c| c) {
            return;
        }
        let Some(mesh) = self.mesh(st) else { return };
        let front: Vec<bool> = (0..mesh.face_count())
            .map(|f| st.pose.faces_camera(&mesh.face_area_normal(f)))
            .collect();
        let mut silhouette: Vec<u32> = Vec::new();
        for &(a, b, f1, f2) in &self.edges {
            let on = match f2 {
                Some(f2) => front[f1 as usize] != front[f2 as usize],
                None => front[f1 as usize],
            };
            if on {
                silhouette.push(a);
                silhouette.push(b);
            }
        }
        silhouette.sort_unstable();
        silhouette.dedup();
        let proj: Vec<Vector2<f64>> = silhouette
            .iter()
            .map(|&v| st.pose.project(&mesh.vertices[v as usize]))
            .collect();
        for l in 0..self.ids.len() {
            if !self.contour[l] {
                continue;
            }
            let target = self.points[l];
            let mut best = (st.pose.project(&mesh.vertices[self.ids[l] as usize]) - target).norm_squared();
            for (v, p) in silhouette.iter().zip(&proj) {
                let d = (p - target).norm_squared();
                if d < best {
                    best = d;
                    self.ids[l] = *v;
                }
            }
        }
    }
}

fn edge_faces(mesh: &Mesh) -> Vec<(u32, u32, u32, Option<u32>)> {
    let mut map: BTreeMap<(u32, u32), (u32, Option<u32>)> = BTreeMap::new();
    for (fi, f) in mesh.faces().iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (f[k].min(f[(k + 1) % 3]), f[k].max(f[(k + 1) % 3]));
            map.entry((a, b))
                .and_modify(|e| e.1 = e.1.or(Some(fi as u32)))
                .or_insert((fi as u32, None));
        }
    }
    map.into_iter().map(|((a, b), (f1, f2))| (a, b, f1, f2)).collect()
}

fn start_weights(mean: &[f64], basis: &DMatrix<f64>) -> Vec<f64> {
    if mean.iter().map(|x| x * x).sum::<f64>() > 1e-24 {
        mean.to_vec()
    } else {
        basis.row(0).iter().copied().collect()
    }
}

/// Fits pose, identity, expression, albedo and lighting to one image with
/// 2D landmarks by alternating Gauss-Newton and linear least-squares blocks.
pub fn fit_image(
    m: &BilinearModel,
    albedo: &AlbedoModel,
    image: &LinearImage,
    landmarks: &LandmarkSet,
    cfg: &FitConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    if albedo.vertex_count() != m.template.vertex_count() {
        return Err(Error::DimensionMismatch {
            expected: m.template.vertex_count(),
            got: albedo.vertex_count(),
        });
    }
    if image.width == 0 || image.height == 0 {
        return Err(Error::EmptyViewport);
    }
    let points = landmarks
        .points2d
        .clone()
        .ok_or_else(|| Error::Invalid("landmarks carry no 2D points".into()))?;
    landmarks.validate(m.template.vertex_count())?;
    let id_stats = m.id_stats();
    let exp_stats = m.exp_stats();
    let mut pb = Problem {
        m,
        alb: albedo,
        image,
        cfg,
        contour: if landmarks.contour.len() == points.len() {
            landmarks.contour.clone()
        } else {
            vec![false; points.len()]
        },
        points,
        ids: landmarks.template_vertex_ids.clone(),
        id_mean: id_stats.mean.clone(),
        id_std: id_stats.std.clone(),
        exp_mean: exp_stats.mean.clone(),
        exp_std: exp_stats.std.clone(),
        n_id: cfg.n_id.min(m.r_id()),
        n_exp: cfg.n_exp.min(m.r_exp()),
        n_alb: cfg.n_alb.min(albedo.components()),
        edges: edge_faces(&m.template),
    };

    let w_id = start_weights(&id_stats.mean, &m.id_basis);
    let w_exp = start_weights(&exp_stats.mean, &m.exp_basis);
    let start = m.synthesize(&w_id, &w_exp)?;
    let x3: Vec<Vector3<f64>> = pb.ids.iter().map(|&v| vec3(&start, v as usize)).collect();
    let pose = init_pose(&x3, &pb.points)?;
    let mut st = FitState {
        pose,
        w_id,
        w_exp,
        w_alb: vec![0.0; albedo.components()],
        sh: Sh9::zero(),
    };

    // ambient lighting matching the mean image intensity
    let mesh = m.synthesize_mesh(&st.w_id, &st.w_exp)?;
    let samples = visible_samples(&mesh, &st.pose, image)?;
    let alb0 = albedo.albedo(&st.w_alb)?;
    let flat_light = Sh9::ambient(1.0);
    let shaded = synthesize_samples(&mesh, &alb0, &flat_light, &samples);
    for ch in 0..3 {
        let num: f64 = samples.targets.iter().map(|t| t[ch]).sum();
        let den: f64 = shaded.iter().map(|s| s[ch]).sum();
        let level = if den > 0.0 { num / den } else { 1.0 };
        st.sh.coeffs[ch] = Sh9::ambient(level).coeffs[ch];
    }

    let first = pb.terms(&st).ok_or(Error::FaceNotVisible)?;
    let mut e = first.total;
    let mut trace = vec![first];
    let (mut mu_a, mut mu_c) = (1e-3, 1e-3);
    let mut iterations = 0;
    let mut exhausted = false;
    for it in 0..cfg.max_outer_iterations {
        iterations = it + 1;
        let e_start = e;
        let mut accepted = false;
        for _ in 0..cfg.landmark_steps {
            let Some((h, g)) = pb.landmark_system(&st) else { break };
            let before = e;
            if !pb.lm_step(&mut st, &mut e, &h, &g, &mut mu_a) {
                break;
            }
            accepted = true;
            if before - e <= cfg.rel_tolerance * before {
                break;
            }
        }
        accepted |= pb.appearance_step(&mut st, &mut e);
        for _ in 0..cfg.full_steps {
            let Some((h, g)) = pb.full_system(&st) else { break };
            if !pb.lm_step(&mut st, &mut e, &h, &g, &mut mu_c) {
                break;
            }
            accepted = true;
        }
        pb.reselect_contour(&st);
        let terms = pb.terms(&st).ok_or(Error::FaceNotVisible)?;
        e = terms.total;
        trace.push(terms);
        debug!("fit iteration {iterations}: energy {e:.6e}");
        exhausted = !accepted;
        if e_start - e <= cfg.rel_tolerance * e_start {
            break;
        }
    }
    if exhausted && trace.len() > 1 {
        warn!("fit stopped: no step lowered the energy in the last iteration");
    }
    Ok(FitResult {
        pose: st.pose,
        w_id: st.w_id,
        w_exp: st.w_exp,
        w_alb: st.w_alb,
        sh: st.sh,
        energy_trace: trace,
        landmark_vertex_ids: pb.ids,
        iterations,
        line_search_exhausted: exhausted,
    })
}

/// Total energy and its terms at `state`, as minimized by [`fit_image`].
pub fn total_energy(
    m: &BilinearModel,
    albedo: &AlbedoModel,
    image: &LinearImage,
    landmarks: &LandmarkSet,
    state: &FitState,
    cfg: &FitConfig,
) -> Result<EnergyTerms> {
    let points = landmarks
        .points2d
        .clone()
        .ok_or_else(|| Error::Invalid("landmarks carry no 2D points".into()))?;
    let (id_stats, exp_stats) = (m.id_stats(), m.exp_stats());
    let pb = Problem {
        m,
        alb: albedo,
        image,
        cfg,
        contour: vec![false; points.len()],
        points,
        ids: landmarks.template_vertex_ids.clone(),
        id_mean: id_stats.mean,
        id_std: id_stats.std,
        exp_mean: exp_stats.mean,
        exp_std: exp_stats.std,
        n_id: cfg.n_id.min(m.r_id()),
        n_exp: cfg.n_exp.min(m.r_exp()),
        n_alb: cfg.n_alb.min(albedo.components()),
        edges: Vec::new(),
    };
    pb.terms(state).ok_or(Error::FaceNotVisible)
}
