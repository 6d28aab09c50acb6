use nalgebra::{DMatrix, DVector, Vector2, Vector3};

use super::{AlbedoModel, FitState};
use crate::error::{Error, Result};
use crate::mesh::normalize;
use crate::morphable::BilinearModel;
use crate::registration::LandmarkSet;
use crate::render::{rasterize_coverage, sh_irradiance, sh_shade_jacobian, shade_sample, LinearImage, NO_FACE};
use crate::Mesh;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoseGradient {
    pub s: f64,
    /// With respect to an axis-angle increment composed on the left of `R`.
    pub omega: Vector3<f64>,
    pub t: Vector2<f64>,
}

/// Energy value with its gradient over every fit parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyGradient {
    pub value: f64,
    pub pose: PoseGradient,
    pub w_id: Vec<f64>,
    pub w_exp: Vec<f64>,
    pub w_alb: Vec<f64>,
    pub sh: [f64; 27],
}

impl EnergyGradient {
    pub(crate) fn zeros(state: &FitState) -> Self {
        Self {
            value: 0.0,
            pose: PoseGradient::default(),
            w_id: vec![0.0; state.w_id.len()],
            w_exp: vec![0.0; state.w_exp.len()],
            w_alb: vec![0.0; state.w_alb.len()],
            sh: [0.0; 27],
        }
    }
}

/// Rows `3v..3v+3` of `∂X/∂w_id` and `∂X/∂w_exp`.
pub(crate) fn vertex_jacobian(
    m: &BilinearModel,
    w_id: &[f64],
    w_exp: &[f64],
    v: usize,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (ra, rb) = (m.r_exp(), m.r_id());
    let mut jid = DMatrix::zeros(3, rb);
    let mut jexp = DMatrix::zeros(3, ra);
    for d in 0..3 {
        let k = 3 * v + d;
        for a in 0..ra {
            let row = &m.core[(k * ra + a) * rb..(k * ra + a + 1) * rb];
            let mut acc = 0.0;
            for b in 0..rb {
                jid[(d, b)] += row[b] * w_exp[a];
                acc += row[b] * w_id[b];
            }
            jexp[(d, a)] = acc;
        }
    }
    (jid, jexp)
}

/// Chain a flat per-coordinate gradient `∂E/∂X` to the model weights.
pub(crate) fn weight_gradients(m: &BilinearModel, w_id: &[f64], w_exp: &[f64], gx: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (ra, rb) = (m.r_exp(), m.r_id());
    let mut gid = vec![0.0; rb];
    let mut gexp = vec![0.0; ra];
    for (k, &g) in gx.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        for a in 0..ra {
            let row = &m.core[(k * ra + a) * rb..(k * ra + a + 1) * rb];
            let ga = g * w_exp[a];
            let mut acc = 0.0;
            for b in 0..rb {
                gid[b] += ga * row[b];
                acc += row[b] * w_id[b];
            }
            gexp[a] += g * acc;
        }
    }
    (gid, gexp)
}

fn landmark_points(landmarks: &LandmarkSet, vertex_count: usize) -> Result<&[Vector2<f64>]> {
    let pts = landmarks
        .points2d
        .as_deref()
        .ok_or_else(|| Error::Invalid("landmarks carry no 2D points".into()))?;
    if pts.len() != landmarks.template_vertex_ids.len() {
        return Err(Error::DimensionMismatch {
            expected: landmarks.template_vertex_ids.len(),
            got: pts.len(),
        });
    }
    if let Some(&v) = landmarks
        .template_vertex_ids
        .iter()
        .find(|&&v| v as usize >= vertex_count)
    {
        return Err(Error::Invalid(format!("landmark vertex {v} out of range")));
    }
    Ok(pts)
}

/// Mean squared pixel distance between projected landmark vertices and `points2d`.
pub fn landmark_energy(m: &BilinearModel, state: &FitState, landmarks: &LandmarkSet) -> Result<EnergyGradient> {
    let pts = landmark_points(landmarks, m.template.vertex_count())?;
    let flat = m.synthesize(&state.w_id, &state.w_exp)?;
    let mut out = EnergyGradient::zeros(state);
    let n = pts.len().max(1) as f64;
    let pose = &state.pose;
    let mut gx = vec![0.0; flat.len()];
    for (&v, p) in landmarks.template_vertex_ids.iter().zip(pts) {
        let v = v as usize;
        let x = Vector3::new(flat[3 * v], flat[3 * v + 1], flat[3 * v + 2]);
        let y = pose.r * x;
        let r = Vector2::new(y.x, y.y) * pose.s + pose.t - p;
        out.value += r.norm_squared() / n;
        let g = r * (2.0 / n);
        out.pose.t += g;
        out.pose.s += g.dot(&Vector2::new(y.x, y.y));
        let g3 = Vector3::new(g.x, g.y, 0.0) * pose.s;
        out.pose.omega += y.cross(&g3);
        let gxv = pose.r.transpose() * g3;
        for d in 0..3 {
            gx[3 * v + d] += gxv[d];
        }
    }
    let (gid, gexp) = weight_gradients(m, &state.w_id, &state.w_exp, &gx);
    out.w_id = gid;
    out.w_exp = gexp;
    Ok(out)
}

/// Jacobian of one landmark's projection: pose `[s, ω, t]` (2×6), identity and expression weights.
pub(crate) fn landmark_jacobian(
    m: &BilinearModel,
    state: &FitState,
    x: &Vector3<f64>,
    v: usize,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let pose = &state.pose;
    let y = pose.r * x;
    let mut jp = DMatrix::zeros(2, 6);
    jp[(0, 0)] = y.x;
    jp[(1, 0)] = y.y;
    // ∂y/∂ω = −[y]×, keep the first two rows
    let cross = nalgebra::Matrix3::new(0.0, -y.z, y.y, y.z, 0.0, -y.x, -y.y, y.x, 0.0);
    for i in 0..2 {
        for j in 0..3 {
            jp[(i, 1 + j)] = -pose.s * cross[(i, j)];
        }
    }
    jp[(0, 4)] = 1.0;
    jp[(1, 5)] = 1.0;
    let p = DMatrix::from_fn(2, 3, |i, j| pose.s * pose.r[(i, j)]);
    let (jid, jexp) = vertex_jacobian(m, &state.w_id, &state.w_exp, v);
    (jp, &p * jid, &p * jexp)
}

/// Pixels of the face that stay fixed while the photometric term is linearized.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelSamples {
    pub pixels: Vec<usize>,
    pub faces: Vec<u32>,
    pub barycentric: Vec<[f64; 3]>,
    pub targets: Vec<Vector3<f64>>,
}

impl PixelSamples {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Every `stride`-th sample.
    pub fn strided(&self, stride: usize) -> Self {
        fn sel<T: Copy>(v: &[T], stride: usize) -> Vec<T> {
            v.iter().step_by(stride.max(1)).copied().collect()
        }
        Self {
            pixels: sel(&self.pixels, stride),
            faces: sel(&self.faces, stride),
            barycentric: sel(&self.barycentric, stride),
            targets: sel(&self.targets, stride),
        }
    }
}

/// Covered pixels whose nearest triangle faces the camera.
pub fn visible_samples(mesh: &Mesh, pose: &crate::render::CameraPose, image: &LinearImage) -> Result<PixelSamples> {
    let cov = rasterize_coverage(mesh, pose, image.width, image.height)?;
    let mut out = PixelSamples {
        pixels: Vec::new(),
        faces: Vec::new(),
        barycentric: Vec::new(),
        targets: Vec::new(),
    };
    let front: Vec<bool> = (0..mesh.face_count())
        .map(|f| pose.faces_camera(&mesh.face_area_normal(f)))
        .collect();
    for (i, &f) in cov.face.iter().enumerate() {
        if f != NO_FACE && front[f as usize] {
            out.pixels.push(i);
            out.faces.push(f);
            out.barycentric.push(cov.barycentric[i]);
            out.targets.push(image.pixels[i]);
        }
    }
    if out.is_empty() {
        return Err(Error::FaceNotVisible);
    }
    Ok(out)
}

/// Synthesized colors of the samples, through the renderer's shading path.
pub fn synthesize_samples(
    mesh: &Mesh,
    albedo: &[Vector3<f64>],
    light: &crate::render::Sh9<f64>,
    samples: &PixelSamples,
) -> Vec<Vector3<f64>> {
    let normals = mesh.vertex_normals();
    samples
        .faces
        .iter()
        .zip(&samples.barycentric)
        .map(|(&f, b)| shade_sample(&normals, albedo, mesh.faces()[f as usize], *b, light))
        .collect()
}

/// Photometric energy: mean over visible pixels of the RGB L2 distance between
/// synthesized and input color (squared distance with `squared`).
pub fn pixel_energy(
    m: &BilinearModel,
    albedo: &AlbedoModel,
    state: &FitState,
    image: &LinearImage,
    squared: bool,
) -> Result<EnergyGradient> {
    let mesh = m.synthesize_mesh(&state.w_id, &state.w_exp)?;
    let samples = visible_samples(&mesh, &state.pose, image)?;
    pixel_energy_fixed(m, albedo, state, &samples, squared)
}

/// Per-pixel L2 norm or its square, and the derivative scale `∂e/∂r = k·r`.
#[inline]
pub(crate) fn norm_term(r: &Vector3<f64>, squared: bool) -> (f64, f64) {
    if squared {
        (r.norm_squared(), 2.0)
    } else {
        let n = r.norm();
        (n, if n > 0.0 { 1.0 / n } else { 0.0 })
    }
}

/// [`pixel_energy`] on a frozen sample set; geometry gradients flow through the
/// interpolated vertex normals only.
pub fn pixel_energy_fixed(
    m: &BilinearModel,
    albedo_model: &AlbedoModel,
    state: &FitState,
    samples: &PixelSamples,
    squared: bool,
) -> Result<EnergyGradient> {
    if samples.is_empty() {
        return Err(Error::FaceNotVisible);
    }
    let mesh = m.synthesize_mesh(&state.w_id, &state.w_exp)?;
    let albedo = albedo_model.albedo(&state.w_alb)?;
    if albedo.len() != mesh.vertex_count() {
        return Err(Error::DimensionMismatch {
            expected: mesh.vertex_count(),
            got: albedo.len(),
        });
    }
    let geo = NormalField::new(&mesh);
    let synth = synthesize_samples(&mesh, &albedo, &state.sh, samples);
    let count = samples.len() as f64;
    let mut out = EnergyGradient::zeros(state);
    let mut g_nhat = vec![Vector3::zeros(); mesh.vertex_count()];
    let mut g_alb = vec![0.0; 3 * mesh.vertex_count()];
    for (q, (&f, b)) in samples.faces.iter().zip(&samples.barycentric).enumerate() {
        let idx = mesh.faces()[f as usize].map(|i| i as usize);
        let r = synth[q] - samples.targets[q];
        let (e, k) = norm_term(&r, squared);
        out.value += e / count;
        let g_i = r * (k / count);
        if g_i == Vector3::zeros() {
            continue;
        }
        let n_raw = geo.unit[idx[0]] * b[0] + geo.unit[idx[1]] * b[1] + geo.unit[idx[2]] * b[2];
        let n = normalize(&n_raw);
        let rho = albedo[idx[0]] * b[0] + albedo[idx[1]] * b[1] + albedo[idx[2]] * b[2];
        let irr = sh_irradiance(&n, &state.sh);
        let (jac, factors) = sh_shade_jacobian(&n, &state.sh);
        let mut g_n = Vector3::zeros();
        for c in 0..3 {
            let shade = irr[c].max(0.0);
            for j in 0..3 {
                g_alb[3 * idx[j] + c] += g_i[c] * shade * b[j];
            }
            if irr[c] > 0.0 {
                let gs = g_i[c] * rho[c];
                for k in 0..9 {
                    out.sh[c * 9 + k] += gs * factors[k];
                }
                g_n += Vector3::new(jac[(c, 0)], jac[(c, 1)], jac[(c, 2)]) * gs;
            }
        }
        let len = n_raw.norm();
        if len > 0.0 {
            let g_raw = (g_n - n * n.dot(&g_n)) / len;
            for j in 0..3 {
                g_nhat[idx[j]] += g_raw * b[j];
            }
        }
    }
    out.w_alb = albedo_model
        .basis
        .tr_mul(&DVector::from_column_slice(&g_alb))
        .as_slice()
        .to_vec();
    let gx = geo.backprop(&mesh, &g_nhat);
    let (gid, gexp) = weight_gradients(m, &state.w_id, &state.w_exp, &gx);
    out.w_id = gid;
    out.w_exp = gexp;
    Ok(out)
}

/// Unnormalized and unit vertex normals, with reverse and forward derivatives.
pub(crate) struct NormalField {
    pub sum: Vec<Vector3<f64>>,
    pub unit: Vec<Vector3<f64>>,
}

impl NormalField {
    pub fn new(mesh: &Mesh) -> Self {
        let mut sum = vec![Vector3::zeros(); mesh.vertex_count()];
        for (fi, f) in mesh.faces().iter().enumerate() {
            let c = mesh.face_area_normal(fi);
            for &i in f {
                sum[i as usize] += c;
            }
        }
        let unit = sum.iter().map(normalize).collect();
        Self { sum, unit }
    }

    /// `∂E/∂X` (flat) from `∂E/∂n̂_v`.
    pub fn backprop(&self, mesh: &Mesh, g_unit: &[Vector3<f64>]) -> Vec<f64> {
        let g_sum: Vec<Vector3<f64>> = self
            .sum
            .iter()
            .zip(&self.unit)
            .zip(g_unit)
            .map(|((s, u), g)| {
                let len = s.norm();
                if len > 0.0 {
                    (g - u * u.dot(g)) / len
                } else {
                    Vector3::zeros()
                }
            })
            .collect();
        let mut gx = vec![0.0; 3 * mesh.vertex_count()];
        for f in mesh.faces() {
            let [a, b, c] = f.map(|i| i as usize);
            let g = g_sum[a] + g_sum[b] + g_sum[c];
            if g == Vector3::zeros() {
                continue;
            }
            let (x0, x1, x2) = (mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]);
            let (e1, e2) = (x1 - x0, x2 - x0);
            let g1 = e2.cross(&g);
            let g2 = g.cross(&e1);
            for d in 0..3 {
                gx[3 * b + d] += g1[d];
                gx[3 * c + d] += g2[d];
                gx[3 * a + d] -= g1[d] + g2[d];
            }
        }
        gx
    }

    /// Directional derivative of every unit normal along vertex displacement `dx` (flat).
    pub fn forward(&self, mesh: &Mesh, dx: &[f64]) -> Vec<Vector3<f64>> {
        let mut d_sum = vec![Vector3::zeros(); mesh.vertex_count()];
        let at = |v: usize| Vector3::new(dx[3 * v], dx[3 * v + 1], dx[3 * v + 2]);
        for f in mesh.faces() {
            let [a, b, c] = f.map(|i| i as usize);
            let (x0, x1, x2) = (mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]);
            let (e1, e2) = (x1 - x0, x2 - x0);
            let (de1, de2) = (at(b) - at(a), at(c) - at(a));
            let dc = de1.cross(&e2) + e1.cross(&de2);
            d_sum[a] += dc;
            d_sum[b] += dc;
            d_sum[c] += dc;
        }
        d_sum
            .iter()
            .zip(&self.sum)
            .zip(&self.unit)
            .map(|((ds, s), u)| {
                let len = s.norm();
                if len > 0.0 {
                    (ds - u * u.dot(ds)) / len
                } else {
                    Vector3::zeros()
                }
            })
            .collect()
    }
}

/// Diagonal Gaussian energy `Σ (w_k/σ_k)²` and its gradient.
pub fn regularization_energy(w: &[f64], std: &[f64]) -> Result<(f64, Vec<f64>)> {
    if w.len() != std.len() {
        return Err(Error::DimensionMismatch {
            expected: std.len(),
            got: w.len(),
        });
    }
    let value = w.iter().zip(std).map(|(x, s)| (x / s).powi(2)).sum();
    let grad = w.iter().zip(std).map(|(x, s)| 2.0 * x / (s * s)).collect();
    Ok((value, grad))
}
