use nalgebra::{Matrix3x4, Vector3};
use serde::{Deserialize, Serialize};

use crate::scalar::Real;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: f64 = 1.092_548_430_592_079_2;
const C3: f64 = 0.315_391_565_252_520_05;
const C4: f64 = 0.546_274_215_296_039_6;

/// Lambertian convolution constants per band.
pub const BAND_WEIGHTS: [f64; 3] = [
    std::f64::consts::PI,
    2.0 * std::f64::consts::PI / 3.0,
    std::f64::consts::FRAC_PI_4,
];

/// Band of each of the nine coefficients.
pub const BAND: [usize; 9] = [0, 1, 1, 1, 2, 2, 2, 2, 2];

/// Real spherical harmonics of bands 0–2 at a unit direction.
pub fn sh_basis<T: Real>(n: &Vector3<T>) -> [T; 9] {
    let (x, y, z) = (n.x, n.y, n.z);
    let c = |v: f64| T::of(v);
    [
        c(C0),
        c(C1) * y,
        c(C1) * z,
        c(C1) * x,
        c(C2) * x * y,
        c(C2) * y * z,
        c(C3) * (c(3.0) * z * z - T::one()),
        c(C2) * x * z,
        c(C4) * (x * x - y * y),
    ]
}

/// Jacobian of [`sh_basis`] with respect to the (unnormalized) direction components.
pub fn sh_basis_gradient(n: &Vector3<f64>) -> [Vector3<f64>; 9] {
    let (x, y, z) = (n.x, n.y, n.z);
    [
        Vector3::zeros(),
        Vector3::new(0.0, C1, 0.0),
        Vector3::new(0.0, 0.0, C1),
        Vector3::new(C1, 0.0, 0.0),
        Vector3::new(C2 * y, C2 * x, 0.0),
        Vector3::new(0.0, C2 * z, C2 * y),
        Vector3::new(0.0, 0.0, 6.0 * C3 * z),
        Vector3::new(C2 * z, 0.0, C2 * x),
        Vector3::new(2.0 * C4 * x, -2.0 * C4 * y, 0.0),
    ]
}

/// Nine lighting coefficients per RGB channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sh9<T: Real> {
    pub coeffs: [[T; 9]; 3],
}

impl<T: Real> Sh9<T> {
    pub fn zero() -> Self {
        Self {
            coeffs: [[T::zero(); 9]; 3],
        }
    }

    /// Constant irradiance `level` on every channel.
    pub fn ambient(level: T) -> Self {
        let mut s = Self::zero();
        for ch in &mut s.coeffs {
            ch[0] = level / T::of(BAND_WEIGHTS[0] * C0);
        }
        s
    }

    /// Coefficients of a distant point light of the given color from direction `dir`,
    /// plus an ambient term.
    pub fn directional(dir: &Vector3<T>, color: Vector3<T>, ambient: T) -> Self {
        let d = crate::mesh::normalize(dir);
        let y = sh_basis(&d);
        let mut s = Self::ambient(ambient);
        for (c, ch) in s.coeffs.iter_mut().enumerate() {
            for k in 0..9 {
                ch[k] += color[c] * y[k];
            }
        }
        s
    }

    pub fn flat(&self) -> [T; 27] {
        let mut out = [T::zero(); 27];
        for c in 0..3 {
            out[c * 9..c * 9 + 9].copy_from_slice(&self.coeffs[c]);
        }
        out
    }

    pub fn from_flat(v: &[T]) -> Self {
        let mut s = Self::zero();
        for c in 0..3 {
            s.coeffs[c].copy_from_slice(&v[c * 9..c * 9 + 9]);
        }
        s
    }

    pub fn scaled(&self, k: T) -> Self {
        let mut s = *self;
        s.coeffs.iter_mut().flatten().for_each(|v| *v *= k);
        s
    }
}

/// Unclamped irradiance per channel.
pub fn sh_irradiance<T: Real>(n: &Vector3<T>, light: &Sh9<T>) -> Vector3<T> {
    let y = sh_basis(n);
    let mut out = Vector3::zeros();
    for c in 0..3 {
        let mut acc = T::zero();
        for k in 0..9 {
            acc += T::of(BAND_WEIGHTS[BAND[k]]) * light.coeffs[c][k] * y[k];
        }
        out[c] = acc;
    }
    out
}

/// Irradiance per channel at unit normal `n`, clamped at zero.
pub fn sh_shade<T: Real>(n: &Vector3<T>, light: &Sh9<T>) -> Vector3<T> {
    sh_irradiance(n, light).map(|v| v.max(T::zero()))
}

/// Gradient of each channel's unclamped irradiance with respect to `n`
/// (rows of the 3×3 block), plus the per-coefficient factors `Â_k·Y_k(n)`
/// in the fourth column's place (returned separately).
pub fn sh_shade_jacobian(n: &Vector3<f64>, light: &Sh9<f64>) -> (Matrix3x4<f64>, [f64; 9]) {
    let g = sh_basis_gradient(n);
    let y = sh_basis(n);
    let mut jac = Matrix3x4::zeros();
    for c in 0..3 {
        let mut row = Vector3::zeros();
        for k in 0..9 {
            row += g[k] * (BAND_WEIGHTS[BAND[k]] * light.coeffs[c][k]);
        }
        jac[(c, 0)] = row.x;
        jac[(c, 1)] = row.y;
        jac[(c, 2)] = row.z;
    }
    let mut factors = [0.0; 9];
    for k in 0..9 {
        factors[k] = BAND_WEIGHTS[BAND[k]] * y[k];
    }
    (jac, factors)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Projects `f` on the basis by midpoint quadrature over (θ, φ).
    fn project_numerically(f: impl Fn(&Vector3<f64>) -> f64) -> [f64; 9] {
        let (nt, np) = (400, 800);
        let mut out = [0.0; 9];
        for i in 0..nt {
            let th = (i as f64 + 0.5) * std::f64::consts::PI / nt as f64;
            for j in 0..np {
                let ph = (j as f64 + 0.5) * 2.0 * std::f64::consts::PI / np as f64;
                let n = Vector3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos());
                let w = th.sin() * (std::f64::consts::PI / nt as f64) * (2.0 * std::f64::consts::PI / np as f64);
                let y = sh_basis(&n);
                let v = f(&n);
                for k in 0..9 {
                    out[k] += v * y[k] * w;
                }
            }
        }
        out
    }

    #[test]
    fn basis_is_orthonormal() {
        for k in 0..9 {
            let p = project_numerically(|n| sh_basis(n)[k]);
            for (j, v) in p.iter().enumerate() {
                let expect = if j == k { 1.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-4, "{k},{j}: {v}");
            }
        }
    }

    #[test]
    fn ambient_light_is_constant() {
        let l = Sh9::ambient(0.7);
        for n in [Vector3::x(), -Vector3::y(), Vector3::new(0.6, 0.0, 0.8)] {
            let s = sh_shade(&n, &l);
            assert!((s - Vector3::repeat(0.7)).norm() < 1e-12);
        }
    }

    #[test]
    fn directional_light_matches_quadrature_of_clamped_cosine() {
        let l = Vector3::new(0.3, -0.5, 0.81).normalize();
        // the oracle: clamped cosine projected on the basis numerically
        let coeffs = project_numerically(|n| n.dot(&l).max(0.0));
        let oracle = |n: &Vector3<f64>| {
            let y = sh_basis(n);
            (0..9).map(|k| coeffs[k] * y[k]).sum::<f64>()
        };
        let light = Sh9::directional(&l, Vector3::repeat(1.0), 0.0);
        let perp = l.cross(&Vector3::x()).normalize();
        let at_l = sh_shade(&l, &light)[0];
        let at_perp = sh_shade(&perp, &light)[0];
        assert!((at_l - oracle(&l)).abs() < 1e-4);
        assert!((at_perp - oracle(&perp)).abs() < 1e-4);
        assert!((at_l / at_perp - oracle(&l) / oracle(&perp)).abs() < 1e-2);
        assert!((at_l - 1.0625).abs() < 1e-12 && (at_perp - 0.09375).abs() < 1e-12);
    }

    #[test]
    fn negated_light_clamps_to_zero() {
        let light = Sh9::directional(&Vector3::new(0.0, 0.0, 1.0), Vector3::new(1.0, 0.8, 0.5), 0.1);
        let neg = light.scaled(-1.0);
        for n in [Vector3::z(), Vector3::new(0.0, 0.6, 0.8), Vector3::x()] {
            let s = sh_shade(&n, &light);
            let sn = sh_shade(&n, &neg);
            for c in 0..3 {
                assert!(sn[c] >= 0.0);
                if s[c] > 0.0 {
                    assert_eq!(sn[c], 0.0);
                }
            }
        }
    }

    #[test]
    fn shading_is_linear_in_coefficients() {
        let a = Sh9::directional(&Vector3::new(1.0, 2.0, 3.0), Vector3::new(0.2, 0.3, 0.4), 0.5);
        let b = Sh9::directional(&Vector3::new(-1.0, 0.5, 2.0), Vector3::new(0.6, 0.1, 0.2), 0.1);
        let sum = Sh9::from_flat(&a.flat().iter().zip(b.flat()).map(|(x, y)| x + y).collect::<Vec<_>>());
        let n = Vector3::new(0.2, 0.3, 0.9).normalize();
        let lhs = sh_irradiance(&n, &sum);
        let rhs = sh_irradiance(&n, &a) + sh_irradiance(&n, &b);
        assert!((lhs - rhs).norm() < 1e-14);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let light = Sh9::directional(&Vector3::new(0.3, 0.4, 1.0), Vector3::new(0.9, 0.7, 0.5), 0.2);
        let n = Vector3::new(0.3, -0.2, 0.9);
        let (jac, _) = sh_shade_jacobian(&n, &light);
        let h = 1e-6;
        for d in 0..3 {
            let mut e = Vector3::zeros();
            e[d] = h;
            let fd = (sh_irradiance(&(n + e), &light) - sh_irradiance(&(n - e), &light)) / (2.0 * h);
            for c in 0..3 {
                assert!((fd[c] - jac[(c, d)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn works_in_f32() {
        let l = Sh9::<f32>::ambient(0.25);
        assert!((sh_shade(&Vector3::new(0.0f32, 1.0, 0.0), &l)[1] - 0.25).abs() < 1e-6);
    }
}
