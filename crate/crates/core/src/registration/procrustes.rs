use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// `p ↦ s·R·p + t` with `R` a proper rotation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform<T: Real> {
    pub scale: T,
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> SimilarityTransform<T> {
    pub fn identity() -> Self {
        Self {
            scale: T::one(),
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p * self.scale + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        let inv_s = T::one() / self.scale;
        Self {
            scale: inv_s,
            rotation: rt,
            translation: -(rt * self.translation) * inv_s,
        }
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation * self.scale + self.translation,
        }
    }

    /// Residual sum of squares `Σ‖s·R·srcᵢ + t − dstᵢ‖²`.
    pub fn residual(&self, src: &[Vector3<T>], dst: &[Vector3<T>]) -> T {
        src.iter()
            .zip(dst)
            .map(|(a, b)| {
                let d = self.apply(a) - b;
                d.dot(&d)
            })
            .sum()
    }
}

/// Least-squares similarity (or rigid, without `with_scale`) alignment of `src` onto `dst`.
///
/// Closed form from the SVD of the cross-covariance with a determinant
/// correction, so reflections are never returned. The SVD runs in `f64`.
pub fn procrustes_align<T: Real>(
    src: &[Vector3<T>],
    dst: &[Vector3<T>],
    with_scale: bool,
) -> Result<SimilarityTransform<T>> {
    if src.len() != dst.len() {
        return Err(Error::DimensionMismatch {
            expected: src.len(),
            got: dst.len(),
        });
    }
    if src.len() < 3 {
        return Err(Error::RankDeficient("fewer than 3 point pairs"));
    }
    let to64 = |p: &Vector3<T>| Vector3::new(p.x.f64(), p.y.f64(), p.z.f64());
    let xs: Vec<Vector3<f64>> = src.iter().map(to64).collect();
    let ys: Vec<Vector3<f64>> = dst.iter().map(to64).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<Vector3<f64>>() / n;
    let my = ys.iter().sum::<Vector3<f64>>() / n;

    let mut cov = Matrix3::zeros();
    let mut sxx = Matrix3::zeros();
    let mut var_x = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        let (dx, dy) = (x - mx, y - my);
        cov += dy * dx.transpose();
        sxx += dx * dx.transpose();
        var_x += dx.norm_squared();
    }
    cov /= n;
    var_x /= n;

    let sx = sxx.symmetric_eigenvalues();
    let mut ev: Vec<f64> = sx.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if var_x <= 0.0 || ev[1] <= 1e-12 * ev[0].max(f64::MIN_POSITIVE) {
        return Err(Error::RankDeficient("source points are collinear or coincident"));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v requested");
    let d = svd.singular_values;
    let mut s = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        // flip the axis of the smallest singular value
        let k = (0..3)
            .min_by(|&a, &b| d[a].total_cmp(&d[b]))
            .expect("three singular values");
        s[(k, k)] = -1.0;
    }
    let r = u * s * vt;
    let scale = if with_scale {
        (0..3).map(|k| d[k] * s[(k, k)]).sum::<f64>() / var_x
    } else {
        1.0
    };
    if with_scale && scale <= 0.0 {
        return Err(Error::RankDeficient("destination points are coincident"));
    }
    let t = my - r * mx * scale;
    Ok(SimilarityTransform {
        scale: T::of(scale),
        rotation: r.map(T::of),
        translation: t.map(T::of),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};
    use rand::{Rng, SeedableRng};

    fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-50.0..50.0),
                    rng.random_range(-50.0..50.0),
                    rng.random_range(-50.0..50.0),
                )
            })
            .collect()
    }

    pub(crate) fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
        let axis = Unit::new_normalize(Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ));
        Rotation3::from_axis_angle(&axis, rng.random_range(-3.0..3.0)).into_inner()
    }

    #[test]
    fn identity_when_src_equals_dst() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let p = random_points(&mut rng, 12);
        let t = procrustes_align(&p, &p, true).unwrap();
        assert!((t.scale - 1.0).abs() < 1e-12);
        assert!((t.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(t.translation.abs().max() < 1e-12);
    }

    #[test]
    fn recovers_known_similarity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let p = random_points(&mut rng, 20);
        let r0 = random_rotation(&mut rng);
        let t0 = Vector3::new(10.0, -3.0, 7.0);
        let q: Vec<_> = p.iter().map(|x| r0 * x * 2.5 + t0).collect();
        let t = procrustes_align(&p, &q, true).unwrap();
        assert!((t.scale - 2.5).abs() < 1e-9);
        assert!((t.rotation - r0).abs().max() < 1e-9);
        assert!((t.translation - t0).abs().max() < 1e-9);
        assert!((t.rotation.transpose() * t.rotation - Matrix3::identity()).norm() < 1e-9);
    }

    #[test]
    fn never_returns_a_reflection() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let p = random_points(&mut rng, 15);
        let q: Vec<_> = p.iter().map(|x| Vector3::new(-x.x, x.y, x.z)).collect();
        let t = procrustes_align(&p, &q, true).unwrap();
        assert!((t.rotation.determinant() - 1.0).abs() < 1e-9);
        assert!(t.residual(&p, &q) > 1.0);
    }

    #[test]
    fn collinear_input_is_rank_deficient() {
        let p: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(procrustes_align(&p, &p, true), Err(Error::RankDeficient(_))));
        let same = vec![Vector3::new(1.0, 1.0, 1.0); 4];
        assert!(procrustes_align(&same, &same, false).is_err());
    }

    #[test]
    fn residual_invariant_to_common_rigid_motion() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let p = random_points(&mut rng, 10);
            let q = random_points(&mut rng, 10);
            let base = procrustes_align(&p, &q, true).unwrap().residual(&p, &q);
            let r = random_rotation(&mut rng);
            let t = Vector3::new(rng.random(), rng.random(), rng.random()) * 100.0;
            let p2: Vec<_> = p.iter().map(|x| r * x + t).collect();
            let q2: Vec<_> = q.iter().map(|x| r * x + t).collect();
            let moved = procrustes_align(&p2, &q2, true).unwrap().residual(&p2, &q2);
            assert!((base - moved).abs() <= 1e-9 * base.max(1.0), "{base} vs {moved}");
        }
    }

    #[test]
    fn works_in_f32() {
        let p: Vec<Vector3<f32>> = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
        ];
        let q: Vec<_> = p.iter().map(|x| x * 2.0 + Vector3::new(1.0, 2.0, 3.0)).collect();
        let t = procrustes_align(&p, &q, true).unwrap();
        assert!((t.scale - 2.0).abs() < 1e-5);
    }
}
