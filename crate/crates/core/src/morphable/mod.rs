//! Bilinear identity × expression face model built by Tucker decomposition,
//! with person-specific blendshape generation and mesh fitting.

mod fit;
mod model;
mod rig;
mod tensor;

pub use fit::{cumulative_error_curve, fit_to_mesh, MeshFit};
pub use model::{BilinearModel, WeightStats};
pub use rig::{generate_blendshapes, solve_key_weights, BlendshapeRig};
pub use tensor::{assemble_tensor, relative_reconstruction_error, tucker_decompose, Rank3Tensor, TuckerMethod};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::fixtures;
    use crate::Mesh;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Smooth random per-identity and per-expression offsets on a small sphere.
    fn population(seed: u64, ids: usize, exps: usize) -> Vec<Vec<Mesh>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = fixtures::icosphere(40.0, 1);
        let id_dirs: Vec<Vec<Vector3<f64>>> = (0..ids)
            .map(|_| {
                let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                base.vertices
                    .iter()
                    .map(|v| Vector3::new(a * v.x / 40.0, b * v.y / 40.0, a * b * v.z / 80.0))
                    .collect()
            })
            .collect();
        let exp_dirs: Vec<Vec<Vector3<f64>>> = (0..exps)
            .map(|e| {
                let k = e as f64;
                base.vertices
                    .iter()
                    .map(|v| Vector3::new(0.0, k * 0.3 * (v.x / 20.0).sin(), k * 0.2 * (v.y / 15.0).cos()))
                    .collect()
            })
            .collect();
        (0..ids)
            .map(|i| {
                (0..exps)
                    .map(|e| {
                        base.with_vertices(
                            base.vertices
                                .iter()
                                .enumerate()
                                .map(|(k, v)| {
                                    v + id_dirs[i][k]
                                        + exp_dirs[e][k] * (1.0 + 0.1 * i as f64)
                                        + Vector3::new(rng.random::<f64>(), rng.random(), rng.random()) * 0.05
                                })
                                .collect(),
                        )
                    })
                    .collect()
            })
            .collect()
    }

    fn full_model(grid: &[Vec<Mesh>]) -> BilinearModel {
        let t = assemble_tensor(grid, true).unwrap();
        tucker_decompose(&t, grid.len(), grid[0].len(), TuckerMethod::Hosvd).unwrap()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn training_meshes_are_reproduced_at_full_rank() {
        let grid = population(1, 6, 4);
        let m = full_model(&grid);
        for i in 0..6 {
            for e in 0..4 {
                let v = m.synthesize(m.id_row(i).as_slice(), m.exp_row(e).as_slice()).unwrap();
                assert!(max_abs_diff(&v, &grid[i][e].flatten()) < 1e-8);
            }
        }
    }

    #[test]
    fn synthesize_is_bilinear() {
        let grid = population(2, 5, 4);
        let m = full_model(&grid);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rv = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (a, a2, b, b2) = (rv(5), rv(5), rv(4), rv(4));
        let s = |x: &[f64], y: &[f64]| -> Vec<f64> {
            m.synthesize(x, y)
                .unwrap()
                .iter()
                .zip(&m.mean_shape)
                .map(|(p, q)| p - q)
                .collect()
        };
        let sum_a: Vec<f64> = a.iter().zip(&a2).map(|(x, y)| x + y).collect();
        let lhs = s(&sum_a, &b);
        let rhs: Vec<f64> = s(&a, &b).iter().zip(s(&a2, &b)).map(|(x, y)| x + y).collect();
        assert!(max_abs_diff(&lhs, &rhs) < 1e-10);
        let sum_b: Vec<f64> = b.iter().zip(&b2).map(|(x, y)| x + y).collect();
        let lhs = s(&a, &sum_b);
        let rhs: Vec<f64> = s(&a, &b).iter().zip(s(&a, &b2)).map(|(x, y)| x + y).collect();
        assert!(max_abs_diff(&lhs, &rhs) < 1e-10);
        let two_a: Vec<f64> = a.iter().map(|x| 2.0 * x).collect();
        let doubled: Vec<f64> = s(&a, &b).iter().map(|x| 2.0 * x).collect();
        assert!(max_abs_diff(&s(&two_a, &b), &doubled) < 1e-10);
        assert!(max_abs_diff(&m.synthesize(&a, &[0.0; 4]).unwrap(), &m.mean_shape) == 0.0);
        assert!(matches!(
            m.synthesize(&a[..3], &b),
            Err(crate::Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn blendshapes_of_training_subject_match_its_meshes() {
        let grid = population(4, 5, 4);
        let m = full_model(&grid);
        let rig = generate_blendshapes(&m, m.id_row(2).as_slice()).unwrap();
        assert!(max_abs_diff(&rig.neutral.flatten(), &grid[2][0].flatten()) < 1e-6);
        for (e, s) in rig.shapes.iter().enumerate() {
            assert!(max_abs_diff(&s.flatten(), &grid[2][e + 1].flatten()) < 1e-6);
            assert_eq!(s.topology_id(), m.topology_id());
        }
        assert_eq!(rig.key_weights.len(), 3);
    }

    #[test]
    fn reduced_rank_blendshapes_match_truncated_reconstruction() {
        let grid = population(5, 6, 4);
        let t = assemble_tensor(&grid, true).unwrap();
        let m = tucker_decompose(&t, 3, 4, TuckerMethod::Hosvd).unwrap();
        // truncated reconstruction of subject 1: project its id row onto the kept basis
        let full = tucker_decompose(&t, 6, 4, TuckerMethod::Hosvd).unwrap();
        let w = m.id_row(1);
        let rig = generate_blendshapes(&m, w.as_slice()).unwrap();
        for e in 1..4 {
            let rec = m.synthesize(w.as_slice(), m.exp_row(e).as_slice()).unwrap();
            assert!(max_abs_diff(&rig.shapes[e - 1].flatten(), &rec) < 1e-12);
            let truth = full
                .synthesize(full.id_row(1).as_slice(), full.exp_row(e).as_slice())
                .unwrap();
            let err = max_abs_diff(&rec, &truth);
            let bound = full.id_energy[3..].iter().sum::<f64>().sqrt();
            assert!(err <= bound + 1e-9);
        }
    }

    #[test]
    fn mean_identity_blendshapes_average_training_subjects() {
        let grid = population(6, 5, 3);
        let m = full_model(&grid);
        let w = m.id_stats().mean;
        let rig = generate_blendshapes(&m, &w).unwrap();
        for e in 0..3 {
            let shape = if e == 0 { &rig.neutral } else { &rig.shapes[e - 1] };
            let avg: Vec<f64> = (0..m.vertex_dim())
                .map(|k| grid.iter().map(|row| row[e].flatten()[k]).sum::<f64>() / 5.0)
                .collect();
            assert!(max_abs_diff(&shape.flatten(), &avg) < 1e-6);
        }
    }

    #[test]
    fn fit_recovers_outer_product() {
        let grid = population(7, 6, 4);
        let t = assemble_tensor(&grid, true).unwrap();
        let m = tucker_decompose(&t, 4, 3, TuckerMethod::Hosvd).unwrap();
        let a = [0.3, -0.2, 0.5, 0.1];
        let b = [0.6, 0.2, -0.4];
        let target = m.synthesize_mesh(&a, &b).unwrap();
        let fit = fit_to_mesh(&m, &target, 4, 3).unwrap();
        for i in 0..4 {
            for e in 0..3 {
                assert!((fit.w_id[i] * fit.w_exp[e] - a[i] * b[e]).abs() < 1e-6);
            }
        }
        for w in fit.energy_trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-18);
        }
    }

    #[test]
    fn fitting_training_mesh_is_bounded_by_truncation_error() {
        let grid = population(8, 8, 4);
        let t = assemble_tensor(&grid, true).unwrap();
        let m = tucker_decompose(&t, 5, 4, TuckerMethod::Hosvd).unwrap();
        let target = &grid[3][2];
        let fit = fit_to_mesh(&m, target, 5, 4).unwrap();
        let trunc = m.synthesize(m.id_row(3).as_slice(), m.exp_row(2).as_slice()).unwrap();
        let trunc_err = energy_of(&trunc, &target.flatten());
        assert!(*fit.energy_trace.last().unwrap() <= trunc_err * (1.0 + 1e-9));
        for w in fit.energy_trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9));
        }
    }

    fn energy_of(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
    }

    #[test]
    fn raw_target_fit_uses_closest_points() {
        let grid = population(9, 5, 3);
        let m = full_model(&grid);
        let target = crate::mesh::midpoint_subdivide(&grid[1][1]);
        let fit = fit_to_mesh(&m, &target, 5, 3).unwrap();
        let mean_err = fit.per_vertex_error.iter().sum::<f64>() / fit.per_vertex_error.len() as f64;
        assert!(mean_err < 0.1, "{mean_err}");
        for w in fit.energy_trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-12);
        }
    }

    #[test]
    fn model_file_round_trip() {
        let grid = population(10, 4, 3);
        let t = assemble_tensor(&grid, true).unwrap();
        let m = tucker_decompose(&t, 3, 2, TuckerMethod::Hosvd).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fsbm");
        m.save(&path).unwrap();
        let back = BilinearModel::load(&path).unwrap();
        assert_eq!(back.topology_id(), m.topology_id());
        assert_eq!((back.r_id(), back.r_exp()), (3, 2));
        let a = m.synthesize(m.id_row(1).as_slice(), m.exp_row(1).as_slice()).unwrap();
        let b = back
            .synthesize(back.id_row(1).as_slice(), back.exp_row(1).as_slice())
            .unwrap();
        assert!(max_abs_diff(&a, &b) < 1e-3);
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(path.with_extension("json")).unwrap()).unwrap();
        assert_eq!(manifest["magic"], "FSBM");
        assert_eq!(manifest["r_id"], 3);
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(BilinearModel::load(&path), Err(crate::Error::Format { .. })));
    }

    #[test]
    fn cumulative_curve_counts_thresholds() {
        let c = cumulative_error_curve(&[0.1, 0.5, 0.5, 2.0], &[0.0, 0.5, 1.0, 3.0]);
        assert_eq!(c, vec![0.0, 0.75, 0.75, 1.0]);
    }
}
