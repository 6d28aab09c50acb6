use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

/// Weak-perspective camera `x' = s·(R·X).xy + t`.
///
/// Image axes point right and down; camera depth `(R·X).z` grows away from
/// the viewer, so smaller depth is nearer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// Pixels per millimeter.
    pub s: f64,
    pub r: Matrix3<f64>,
    /// Pixels.
    pub t: Vector2<f64>,
}

impl CameraPose {
    /// Frontal view of a model whose `+y` is up and `+z` faces the camera.
    pub fn frontal(s: f64, t: Vector2<f64>) -> Self {
        Self {
            s,
            r: Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)),
            t,
        }
    }

    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        let q = self.r * p;
        Vector2::new(q.x, q.y) * self.s + self.t
    }

    /// Camera-frame depth in mm.
    #[inline]
    pub fn depth(&self, p: &Vector3<f64>) -> f64 {
        self.r.row(2).transpose().dot(p)
    }

    /// Rotation `exp([ω]×)·R`; `ω` is an axis-angle increment.
    pub fn rotated(&self, omega: &Vector3<f64>) -> Self {
        Self {
            r: Rotation3::new(*omega).into_inner() * self.r,
            ..*self
        }
    }

    /// Whether a model-space normal faces the camera.
    #[inline]
    pub fn faces_camera(&self, normal: &Vector3<f64>) -> bool {
        self.r.row(2).transpose().dot(normal) < 0.0
    }
}

pub fn project(points: &[Vector3<f64>], pose: &CameraPose) -> Vec<Vector2<f64>> {
    points.iter().map(|p| pose.project(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_pose_is_orthographic() {
        let pose = CameraPose {
            s: 1.0,
            r: Matrix3::identity(),
            t: Vector2::zeros(),
        };
        let p = Vector3::new(1.5, -2.0, 7.0);
        assert_eq!(pose.project(&p), Vector2::new(1.5, -2.0));
    }

    #[test]
    fn depth_shift_does_not_move_projection() {
        let pose = CameraPose::frontal(3.0, Vector2::new(10.0, 20.0)).rotated(&Vector3::new(0.1, 0.3, -0.2));
        let p = Vector3::new(4.0, 5.0, 6.0);
        // shift along the camera axis expressed in model space
        let axis = pose.r.row(2).transpose();
        let a = pose.project(&p);
        let b = pose.project(&(p + axis * 42.0));
        assert!((a - b).norm() < 1e-12);
        let pts = [p, p + Vector3::new(0.0, 0.0, 9.0)];
        let id = CameraPose {
            s: 2.0,
            r: Matrix3::identity(),
            t: Vector2::zeros(),
        };
        let pr = project(&pts, &id);
        assert_eq!(pr[0], pr[1]);
    }

    #[test]
    fn scale_doubles_centered_coordinates() {
        let t = Vector2::new(5.0, 5.0);
        let one = CameraPose::frontal(1.0, t);
        let two = CameraPose::frontal(2.0, t);
        let p = Vector3::new(3.0, -1.0, 2.0);
        assert!(((two.project(&p) - t) - (one.project(&p) - t) * 2.0).norm() < 1e-12);
    }
}
