//! Analytic head fields on a longitude/latitude face mask.
//!
//! A vertex with atlas coordinate `(u, v)` sits at longitude
//! `φ = (2u − 1)·PHI_MAX` and latitude `θ = (2v − 1)·THETA_MAX`; `+z` is the
//! face direction, `+y` up.

use nalgebra::{Vector2, Vector3};

use crate::Mesh;

pub const PHI_MAX_DEG: f64 = 100.0;
pub const THETA_MAX_DEG: f64 = 65.0;
/// Half extents (mm) of the head superellipsoid along x, y, z.
pub const AXES: [f64; 3] = [72.0, 95.0, 88.0];
/// Exponent `p` of `|x/a|ᵖ + |y/b|ᵖ + |z/c|ᵖ = 1`; 2 is an ellipsoid.
pub const SUPERELLIPSOID_EXPONENT: f64 = 2.5;
/// Width of the boundary band (in atlas units) where expression motion fades to zero.
pub const COLLAR_WIDTH: f64 = 0.08;

/// Identity fields beyond the mean (the identity mode has rank `ID_DIMS + 1`).
pub const ID_DIMS: usize = 4;
/// Expression fields beyond the neutral (the expression mode has rank `EXP_DIMS + 1`).
pub const EXP_DIMS: usize = 2;

const INTERACTION: f64 = 0.12;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Site {
    pub uv: Vector2<f64>,
    pub phi: f64,
    pub theta: f64,
    /// Unit radial direction.
    pub dir: Vector3<f64>,
    pub e_phi: Vector3<f64>,
    pub e_theta: Vector3<f64>,
}

impl Site {
    pub fn new(uv: Vector2<f64>) -> Self {
        let phi = (2.0 * uv.x - 1.0) * PHI_MAX_DEG.to_radians();
        let theta = (2.0 * uv.y - 1.0) * THETA_MAX_DEG.to_radians();
        let (sp, cp) = phi.sin_cos();
        let (st, ct) = theta.sin_cos();
        Self {
            uv,
            phi: phi.to_degrees(),
            theta: theta.to_degrees(),
            dir: Vector3::new(ct * sp, st, ct * cp),
            e_phi: Vector3::new(cp, 0.0, -sp),
            e_theta: Vector3::new(-st * sp, ct, -st * cp),
        }
    }

    /// Gaussian in degrees around `(phi, theta)`.
    fn g(&self, phi: f64, theta: f64, s_phi: f64, s_theta: f64) -> f64 {
        let a = (self.phi - phi) / s_phi;
        let b = (self.theta - theta) / s_theta;
        (-0.5 * (a * a + b * b)).exp()
    }

    /// Mirror pair of Gaussians at `±phi`.
    fn g2(&self, phi: f64, theta: f64, s_phi: f64, s_theta: f64) -> f64 {
        self.g(phi, theta, s_phi, s_theta) + self.g(-phi, theta, s_phi, s_theta)
    }
}

pub(crate) fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// 1 inside the mask, falling to exactly 0 on the boundary band.
pub(crate) fn collar(uv: Vector2<f64>) -> f64 {
    let edge = uv.x.min(1.0 - uv.x).min(uv.y).min(1.0 - uv.y);
    smoothstep(edge / COLLAR_WIDTH)
}

fn superellipsoid(dir: &Vector3<f64>) -> Vector3<f64> {
    let p = SUPERELLIPSOID_EXPONENT;
    let s: f64 = (0..3).map(|k| (dir[k] / AXES[k]).abs().powf(p)).sum();
    dir * s.powf(-1.0 / p)
}

fn mean_shape(s: &Site) -> Vector3<f64> {
    let relief = 16.0 * s.g(0.0, -6.0, 9.0, 14.0) + 6.0 * s.g(0.0, 8.0, 6.0, 10.0) + 3.0 * s.g2(28.0, 20.0, 14.0, 6.0)
        - 7.0 * s.g2(30.0, 7.0, 11.0, 7.0)
        + 3.0 * s.g(0.0, -30.0, 16.0, 5.0)
        + 5.0 * s.g(0.0, -50.0, 16.0, 10.0)
        + 3.0 * s.g2(42.0, -12.0, 14.0, 14.0);
    superellipsoid(&s.dir) + s.dir * relief
}

/// `C_{0b}`: mean head (`b = 0`) and identity fields.
fn identity_field(s: &Site, b: usize, mean: &Vector3<f64>) -> Vector3<f64> {
    match b {
        0 => *mean,
        1 => s.dir * (10.0 * s.g(0.0, -6.0, 9.0, 14.0) + 4.0 * s.g(0.0, 8.0, 6.0, 10.0)),
        2 => Vector3::new(0.07 * mean.x, 0.0, 0.0),
        3 => Vector3::new(0.0, -7.0 * smoothstep((-20.0 - s.theta) / 30.0), 0.0),
        4 => {
            s.dir
                * (4.0 * s.g2(28.0, 20.0, 14.0, 6.0) - 3.0 * s.g2(42.0, -12.0, 14.0, 14.0)
                    + 2.0 * s.g(0.0, -50.0, 16.0, 10.0))
        }
        _ => unreachable!("identity field index"),
    }
}

/// `C_{a0}` for `a ≥ 1`: smile, and jaw drop with raised brows.
fn expression_field(s: &Site, a: usize) -> Vector3<f64> {
    let c = collar(s.uv);
    if c == 0.0 {
        return Vector3::zeros();
    }
    let v = match a {
        1 => {
            let (l, r) = (s.g(-22.0, -32.0, 12.0, 9.0), s.g(22.0, -32.0, 12.0, 9.0));
            (s.e_phi * (r - l) + s.e_theta * (r + l)) * 5.6 + s.dir * (2.5 * s.g2(40.0, -15.0, 12.0, 12.0))
        }
        2 => {
            let jaw = smoothstep((-28.0 - s.theta) / 14.0) * (-0.5 * (s.phi / 35.0).powi(2)).exp();
            Vector3::new(0.0, -12.0 * jaw, -3.0 * jaw) + s.e_theta * (5.0 * s.g2(25.0, 22.0, 20.0, 8.0))
        }
        _ => unreachable!("expression field index"),
    };
    v * c
}

/// Scalar modulation of expression `a` by identity `b` (`C_ab = κ·h_b·C_a0`).
fn interaction(s: &Site, b: usize) -> f64 {
    let (u, v) = (s.uv.x - 0.5, s.uv.y - 0.5);
    INTERACTION
        * match b {
            1 => 1.0,
            2 => 2.0 * u,
            3 => 2.0 * v,
            4 => (std::f64::consts::PI * u).cos() * (std::f64::consts::PI * v).cos(),
            _ => unreachable!("identity field index"),
        }
}

/// Per-vertex fields `C_ab` for `a ≤ EXP_DIMS`, `b ≤ ID_DIMS`.
pub(crate) struct FieldBasis {
    /// `fields[a][b][vertex]`
    fields: Vec<Vec<Vec<Vector3<f64>>>>,
}

impl FieldBasis {
    pub fn new(uvs: &[Vector2<f64>]) -> Self {
        let sites: Vec<Site> = uvs.iter().map(|&uv| Site::new(uv)).collect();
        let mean: Vec<Vector3<f64>> = sites.iter().map(mean_shape).collect();
        let mut fields = vec![vec![Vec::new(); ID_DIMS + 1]; EXP_DIMS + 1];
        for b in 0..=ID_DIMS {
            fields[0][b] = sites.iter().zip(&mean).map(|(s, m)| identity_field(s, b, m)).collect();
        }
        for a in 1..=EXP_DIMS {
            let base: Vec<Vector3<f64>> = sites.iter().map(|s| expression_field(s, a)).collect();
            for b in 1..=ID_DIMS {
                fields[a][b] = sites.iter().zip(&base).map(|(s, e)| e * interaction(s, b)).collect();
            }
            fields[a][0] = base;
        }
        Self { fields }
    }

    /// `Σ_ab ẽ[a]·ĩ[b]·C_ab` with `ẽ = (1, exp)` and `ĩ = (1, id)`.
    pub fn combine(&self, id: &[f64; ID_DIMS], exp: &[f64; EXP_DIMS]) -> Vec<Vector3<f64>> {
        let n = self.fields[0][0].len();
        let mut out = vec![Vector3::zeros(); n];
        for a in 0..=EXP_DIMS {
            let ea = if a == 0 { 1.0 } else { exp[a - 1] };
            if ea == 0.0 {
                continue;
            }
            for b in 0..=ID_DIMS {
                let k = ea * if b == 0 { 1.0 } else { id[b - 1] };
                if k == 0.0 {
                    continue;
                }
                for (o, f) in out.iter_mut().zip(&self.fields[a][b]) {
                    *o += f * k;
                }
            }
        }
        out
    }
}

/// `n×n` vertex grid over the unit atlas square, two triangles per cell, facing `+z`.
pub(crate) fn grid_mesh(n: usize) -> Mesh {
    let mut uvs = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            uvs.push(Vector2::new(c as f64 / (n - 1) as f64, r as f64 / (n - 1) as f64));
        }
    }
    let mut faces = Vec::with_capacity(2 * (n - 1) * (n - 1));
    for r in 0..n - 1 {
        for c in 0..n - 1 {
            let a = (r * n + c) as u32;
            let (b, d, e) = (a + 1, a + n as u32, a + n as u32 + 1);
            // alternate diagonals so the triangulation has no preferred direction
            if (r + c) % 2 == 0 {
                faces.push([a, b, e]);
                faces.push([a, e, d]);
            } else {
                faces.push([a, b, d]);
                faces.push([b, e, d]);
            }
        }
    }
    let vertices = uvs.iter().map(|uv| Vector3::new(uv.x, uv.y, 0.0)).collect();
    Mesh::new(vertices, faces, Some(uvs)).expect("grid is well formed")
}

/// Landmark sites `(φ°, θ°, contour)` in semantic-id order.
pub(crate) const LANDMARK_SITES: [(f64, f64, bool); 25] = [
    (-35.0, 22.0, false),
    (-15.0, 24.0, false),
    (15.0, 24.0, false),
    (35.0, 22.0, false),
    (-40.0, 8.0, false),
    (-18.0, 8.0, false),
    (18.0, 8.0, false),
    (40.0, 8.0, false),
    (0.0, -6.0, false),
    (0.0, -18.0, false),
    (-10.0, -18.0, false),
    (10.0, -18.0, false),
    (-22.0, -32.0, false),
    (0.0, -28.0, false),
    (22.0, -32.0, false),
    (0.0, -38.0, false),
    (0.0, -52.0, false),
    (-70.0, 10.0, true),
    (-70.0, -10.0, true),
    (-62.0, -30.0, true),
    (-45.0, -48.0, true),
    (45.0, -48.0, true),
    (62.0, -30.0, true),
    (70.0, -10.0, true),
    (70.0, 10.0, true),
];

/// Grid vertex nearest to each landmark site.
pub(crate) fn landmark_vertex(n: usize, phi: f64, theta: f64) -> u32 {
    let u = (phi / PHI_MAX_DEG + 1.0) / 2.0;
    let v = (theta / THETA_MAX_DEG + 1.0) / 2.0;
    let c = (u * (n - 1) as f64).round() as usize;
    let r = (v * (n - 1) as f64).round() as usize;
    (r * n + c) as u32
}
