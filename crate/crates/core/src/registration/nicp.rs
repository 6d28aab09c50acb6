//! Optimal-step non-rigid ICP: one affine transform per template vertex,
//! regularized by stiffness across template edges and solved as a sparse
//! linear system per iteration.

use nalgebra::{Matrix4x3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use super::LandmarkSet;
use crate::error::{Error, Result};
use crate::linalg::SparseBuilder;
use crate::mesh::Bvh;
use crate::Mesh;

const PROXIMAL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NicpConfig {
    /// Stiffness weights, strictly decreasing.
    pub stiffness_schedule: Vec<f64>,
    /// Landmark weight of the first stage; halves every stage.
    pub landmark_weight: f64,
    pub max_inner_iterations: usize,
    /// Stop a stage once no vertex moves more than this (mm).
    pub convergence_eps: f64,
    /// Weight of the translation row relative to the linear part in the stiffness term.
    pub gamma: f64,
    /// Correspondences whose normals differ by more than this are dropped (degrees).
    pub max_normal_angle_deg: f64,
    /// Correspondences farther than this multiple of the median distance are dropped.
    pub max_distance_ratio: f64,
    /// Lower bound on the distance rejection threshold (mm), so near-perfect
    /// matches do not reject every pair with a small residual.
    pub min_reject_distance: f64,
}

impl Default for NicpConfig {
    fn default() -> Self {
        Self {
            stiffness_schedule: vec![50.0, 20.0, 5.0, 2.0, 0.8, 0.5],
            landmark_weight: 10.0,
            max_inner_iterations: 10,
            convergence_eps: 1e-3,
            gamma: 1.0,
            max_normal_angle_deg: 60.0,
            max_distance_ratio: 10.0,
            min_reject_distance: 1.0,
        }
    }
}

impl NicpConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.stiffness_schedule;
        if s.is_empty() {
            return Err(Error::Invalid("empty stiffness schedule".into()));
        }
        if s.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::Invalid("stiffness weights must be positive".into()));
        }
        if s.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Invalid("stiffness schedule must strictly decrease".into()));
        }
        if !(self.landmark_weight >= 0.0) || !(self.convergence_eps > 0.0) {
            return Err(Error::Invalid("landmark weight / eps out of range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct NicpStage {
    pub stiffness: f64,
    pub landmark_weight: f64,
    /// Energy at the start of each inner iteration, evaluated after correspondences are refreshed.
    pub energies: Vec<f64>,
    pub iterations: usize,
    pub final_motion: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct NicpReport {
    pub stages: Vec<NicpStage>,
}

struct Correspondences {
    targets: Vec<Vector3<f64>>,
    weights: Vec<f64>,
}

struct Problem<'a> {
    template: &'a Mesh,
    edges: Vec<(u32, u32)>,
    homog: Vec<Vector4<f64>>,
    lm_ids: Vec<usize>,
    lm_points: Vec<Vector3<f64>>,
    gamma: f64,
}

impl Problem<'_> {
    fn n(&self) -> usize {
        self.template.vertex_count()
    }

    fn deform(&self, x: &[Matrix4x3<f64>]) -> Vec<Vector3<f64>> {
        self.homog
            .iter()
            .zip(x)
            .map(|(h, xi)| (h.transpose() * xi).transpose())
            .collect()
    }

    fn energy(&self, x: &[Matrix4x3<f64>], c: &Correspondences, alpha: f64, beta: f64) -> f64 {
        let g = [1.0, 1.0, 1.0, self.gamma];
        let mut stiff = 0.0;
        for &(a, b) in &self.edges {
            let d = x[a as usize] - x[b as usize];
            for r in 0..4 {
                stiff += g[r] * g[r] * d.row(r).norm_squared();
            }
        }
        let pos = self.deform(x);
        let data: f64 = pos
            .iter()
            .zip(&c.targets)
            .zip(&c.weights)
            .map(|((p, t), w)| w * (p - t).norm_squared())
            .sum();
        let lm: f64 = self
            .lm_ids
            .iter()
            .zip(&self.lm_points)
            .map(|(&i, l)| (pos[i] - l).norm_squared())
            .sum();
        alpha * alpha * stiff + data + beta * beta * lm
    }

    fn solve(
        &self,
        prev: &[Matrix4x3<f64>],
        c: &Correspondences,
        alpha: f64,
        beta: f64,
    ) -> Result<Vec<Matrix4x3<f64>>> {
        let n = self.n();
        let mut a = SparseBuilder::new(4 * n);
        let mut rhs = vec![vec![0.0; 4 * n]; 3];
        // proximal term: keeps planar or otherwise degenerate templates solvable
        for (i, x) in prev.iter().enumerate() {
            for r in 0..4 {
                a.add(4 * i + r, 4 * i + r, PROXIMAL);
                for k in 0..3 {
                    rhs[k][4 * i + r] += PROXIMAL * x[(r, k)];
                }
            }
        }
        let g2 = [1.0, 1.0, 1.0, self.gamma * self.gamma];
        let a2 = alpha * alpha;
        for &(i, j) in &self.edges {
            let (i, j) = (i as usize, j as usize);
            for r in 0..4 {
                let w = a2 * g2[r];
                a.add(4 * i + r, 4 * i + r, w);
                a.add(4 * j + r, 4 * j + r, w);
                a.add(4 * i + r, 4 * j + r, -w);
                a.add(4 * j + r, 4 * i + r, -w);
            }
        }
        let mut data_row = |a: &mut SparseBuilder, i: usize, target: &Vector3<f64>, w: f64| {
            let h = self.homog[i];
            for r in 0..4 {
                for s in 0..4 {
                    a.add(4 * i + r, 4 * i + s, w * h[r] * h[s]);
                }
                for k in 0..3 {
                    rhs[k][4 * i + r] += w * h[r] * target[k];
                }
            }
        };
        for i in 0..n {
            if c.weights[i] > 0.0 {
                data_row(&mut a, i, &c.targets[i], c.weights[i]);
            }
        }
        let b2 = beta * beta;
        if b2 > 0.0 {
            for (&i, l) in self.lm_ids.iter().zip(&self.lm_points) {
                data_row(&mut a, i, l, b2);
            }
        }
        let sol = a.solve(&rhs).map_err(|e| Error::NicpSolver(e.to_string()))?;
        Ok((0..n).map(|i| Matrix4x3::from_fn(|r, k| sol[k][4 * i + r])).collect())
    }
}

fn correspondences(
    positions: &[Vector3<f64>],
    normals: &[Vector3<f64>],
    target: &Bvh<f64>,
    cfg: &NicpConfig,
) -> Result<Correspondences> {
    let cos_max = cfg.max_normal_angle_deg.to_radians().cos();
    let hits: Vec<_> = positions
        .iter()
        .map(|p| target.closest_point(p).expect("non-empty target"))
        .collect();
    let mut dists: Vec<f64> = hits.iter().map(|h| h.distance_sq.sqrt()).collect();
    let mut sorted = dists.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let limit = (cfg.max_distance_ratio * median).max(cfg.min_reject_distance);
    let mut weights = Vec::with_capacity(hits.len());
    let mut targets = Vec::with_capacity(hits.len());
    for ((h, n), d) in hits.iter().zip(normals).zip(dists.iter_mut()) {
        let tn = target.hit_point(h.face, h.barycentric).normal;
        let ok_normal = n.norm_squared() == 0.0 || n.dot(&tn) >= cos_max;
        weights.push(if ok_normal && *d <= limit { 1.0 } else { 0.0 });
        targets.push(h.point);
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::NoOverlap);
    }
    Ok(Correspondences { targets, weights })
}

fn vertex_normals_of(template: &Mesh, positions: Vec<Vector3<f64>>) -> Vec<Vector3<f64>> {
    template.with_vertices(positions).vertex_normals()
}

/// Deforms `template` onto `target`; output keeps the template topology.
pub fn nicp_register(template: &Mesh, target: &Mesh, landmarks: &LandmarkSet, cfg: &NicpConfig) -> Result<Mesh> {
    nicp_register_with_report(template, target, landmarks, cfg).map(|(m, _)| m)
}

pub fn nicp_register_with_report(
    template: &Mesh,
    target: &Mesh,
    landmarks: &LandmarkSet,
    cfg: &NicpConfig,
) -> Result<(Mesh, NicpReport)> {
    cfg.validate()?;
    if target.face_count() == 0 {
        return Err(Error::NoOverlap);
    }
    landmarks.validate(template.vertex_count())?;
    let (lm_ids, lm_points) = match &landmarks.points3d {
        Some(p) => (
            landmarks.template_vertex_ids.iter().map(|&v| v as usize).collect(),
            p.clone(),
        ),
        None => (Vec::new(), Vec::new()),
    };
    let problem = Problem {
        template,
        edges: template.edges(),
        homog: template
            .vertices
            .iter()
            .map(|v| Vector4::new(v.x, v.y, v.z, 1.0))
            .collect(),
        lm_ids,
        lm_points,
        gamma: cfg.gamma,
    };
    let bvh = Bvh::build(target);
    let mut x: Vec<Matrix4x3<f64>> = vec![Matrix4x3::identity(); template.vertex_count()];
    let mut report = NicpReport::default();
    let mut beta = cfg.landmark_weight;

    for &alpha in &cfg.stiffness_schedule {
        let mut stage = NicpStage {
            stiffness: alpha,
            landmark_weight: beta,
            ..Default::default()
        };
        let mut pos = problem.deform(&x);
        for _ in 0..cfg.max_inner_iterations {
            let normals = vertex_normals_of(template, pos.clone());
            let corr = correspondences(&pos, &normals, &bvh, cfg)?;
            stage.energies.push(problem.energy(&x, &corr, alpha, beta));
            let next = problem.solve(&x, &corr, alpha, beta)?;
            let next_pos = problem.deform(&next);
            let motion = pos
                .iter()
                .zip(&next_pos)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            x = next;
            pos = next_pos;
            stage.iterations += 1;
            stage.final_motion = motion;
            if motion < cfg.convergence_eps {
                break;
            }
        }
        report.stages.push(stage);
        beta *= 0.5;
    }
    let out = template.with_vertices(problem.deform(&x));
    debug_assert_eq!(out.topology_id(), template.topology_id());
    Ok((out, report))
}

/// Mean distance from mesh vertices to the closest point of `target`'s surface.
pub fn mean_surface_distance(mesh: &Mesh, target: &Mesh) -> f64 {
    let bvh = Bvh::build(target);
    mesh.vertices
        .iter()
        .map(|p| bvh.closest_point(p).map_or(f64::INFINITY, |c| c.distance_sq.sqrt()))
        .sum::<f64>()
        / mesh.vertex_count().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::fixtures;

    fn sphere_landmarks(m: &Mesh, target: &Mesh, ids: &[u32]) -> LandmarkSet {
        LandmarkSet {
            points2d: None,
            points3d: Some(ids.iter().map(|&i| target.vertices[i as usize]).collect()),
            semantic_ids: (0..ids.len() as u32).collect(),
            template_vertex_ids: ids.to_vec(),
            contour: vec![false; ids.len()],
        }
        .tap_validate(m)
    }

    trait TapValidate {
        fn tap_validate(self, m: &Mesh) -> Self;
    }
    impl TapValidate for LandmarkSet {
        fn tap_validate(self, m: &Mesh) -> Self {
            self.validate(m.vertex_count()).unwrap();
            self
        }
    }

    #[test]
    fn fixed_point_when_target_equals_template() {
        let s = fixtures::icosphere(30.0, 2);
        let cfg = NicpConfig::default();
        let out = nicp_register(&s, &s, &LandmarkSet::default(), &cfg).unwrap();
        for (a, b) in out.vertices.iter().zip(&s.vertices) {
            assert!((a - b).norm() < cfg.convergence_eps);
        }
        assert_eq!(out.topology_id(), s.topology_id());
    }

    #[test]
    fn scaled_sphere_with_landmarks() {
        let s = fixtures::icosphere(40.0, 3);
        let target = s.with_vertices(s.vertices.iter().map(|v| v * 1.1).collect());
        let lm = sphere_landmarks(&s, &target, &[0, 3, 5, 8, 11]);
        let (out, report) = nicp_register_with_report(&s, &target, &lm, &NicpConfig::default()).unwrap();
        let d = mean_surface_distance(&out, &target);
        assert!(d < 0.1, "mean surface distance {d}");
        for st in &report.stages {
            for w in st.energies.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-9, "energy rose {:?}", st.energies);
            }
        }
    }

    #[test]
    fn smooth_bump_is_followed() {
        let plane = fixtures::plane(31, 60.0);
        let bump = |v: &Vector3<f64>| {
            let r2 = (v.x - 30.0).powi(2) + (v.y - 30.0).powi(2);
            Vector3::new(v.x, v.y, 5.0 * (-r2 / 200.0).exp())
        };
        let target = plane.with_vertices(plane.vertices.iter().map(bump).collect());
        let ids = [0u32, 30, 930, 960, 480];
        let lm = sphere_landmarks(&plane, &target, &ids);
        let out = nicp_register(&plane, &target, &lm, &NicpConfig::default()).unwrap();
        let bvh = Bvh::build(&target);
        let worst = out
            .vertices
            .iter()
            .map(|p| bvh.closest_point(p).unwrap().distance_sq.sqrt())
            .fold(0.0, f64::max);
        assert!(worst < 0.3, "max distance {worst}");
    }

    #[test]
    fn config_validation() {
        let mut c = NicpConfig::default();
        c.stiffness_schedule = vec![1.0, 2.0];
        assert!(c.validate().is_err());
        c.stiffness_schedule = vec![];
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_target_is_no_overlap() {
        let s = fixtures::icosphere(10.0, 1);
        let empty = Mesh::new(vec![], vec![], None).unwrap();
        assert!(matches!(
            nicp_register(&s, &empty, &LandmarkSet::default(), &NicpConfig::default()),
            Err(Error::NoOverlap)
        ));
    }
}
