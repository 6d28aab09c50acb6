use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::BilinearModel;
use crate::error::{Error, Result};
use crate::mesh::io::{load_mesh, save_mesh};
use crate::Mesh;

const KKT_TOLERANCE: f64 = 1e-8;
const MAX_PG_ITERATIONS: usize = 200_000;

/// Person-specific blendshapes: neutral `e₀` and expression shapes `B_j`.
#[derive(Clone, Debug)]
pub struct BlendshapeRig {
    pub neutral: Mesh,
    pub shapes: Vec<Mesh>,
    /// One weight vector per key expression, entries in `[0,1]`.
    pub key_weights: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct KeyWeightsFile {
    blendshapes: usize,
    key_weights: Vec<Vec<f64>>,
}

impl BlendshapeRig {
    pub fn blendshape_count(&self) -> usize {
        self.shapes.len()
    }

    /// `B_j − e₀` as flat vectors.
    pub fn deltas(&self) -> Vec<Vec<f64>> {
        let e0 = self.neutral.flatten();
        self.shapes
            .iter()
            .map(|s| s.flatten().iter().zip(&e0).map(|(a, b)| a - b).collect())
            .collect()
    }

    /// `e₀ + Σ αⱼ (Bⱼ − e₀)`, evaluated as `(1 − Σαⱼ) e₀ + Σ αⱼ Bⱼ` so that
    /// `α = 0` and one-hot `α` return `e₀` and `Bⱼ` bit for bit.
    pub fn evaluate(&self, alpha: &[f64]) -> Result<Mesh> {
        if alpha.len() != self.shapes.len() {
            return Err(Error::DimensionMismatch {
                expected: self.shapes.len(),
                got: alpha.len(),
            });
        }
        let rest = 1.0 - alpha.iter().sum::<f64>();
        let mut v: Vec<_> = self.neutral.vertices.iter().map(|e| e * rest).collect();
        for (a, s) in alpha.iter().zip(&self.shapes) {
            if *a == 0.0 {
                continue;
            }
            for (p, b) in v.iter_mut().zip(&s.vertices) {
                *p += b * *a;
            }
        }
        Ok(self.neutral.with_vertices(v))
    }

    pub fn save_key_weights(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let f = KeyWeightsFile {
            blendshapes: self.shapes.len(),
            key_weights: self.key_weights.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&f)?)?;
        Ok(())
    }

    /// Writes `neutral.ply`, `blendshape_JJ.ply` (from 01) and `key_weights.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        save_mesh(&self.neutral, dir.join("neutral.ply"))?;
        for (j, s) in self.shapes.iter().enumerate() {
            save_mesh(s, dir.join(format!("blendshape_{:02}.ply", j + 1)))?;
        }
        self.save_key_weights(dir.join("key_weights.json"))
    }

    /// Reads a rig written by [`BlendshapeRig::save`].
    pub fn load(dir: impl AsRef<std::path::Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let neutral: Mesh = load_mesh(dir.join("neutral.ply"))?;
        let mut shapes = Vec::new();
        loop {
            let path = dir.join(format!("blendshape_{:02}.ply", shapes.len() + 1));
            if !path.exists() {
                break;
            }
            let s: Mesh = load_mesh(path)?;
            if !s.same_topology(&neutral) {
                return Err(Error::TopologyMismatch);
            }
            shapes.push(s);
        }
        let path = dir.join("key_weights.json");
        let file = read_key_weights(&path)?;
        if file.blendshapes != shapes.len() {
            return Err(Error::Format {
                path,
                reason: format!("rig directory holds {} blendshapes", shapes.len()),
            });
        }
        Ok(Self {
            neutral,
            shapes,
            key_weights: file.key_weights,
        })
    }

    pub fn load_key_weights(path: impl AsRef<std::path::Path>) -> Result<Vec<Vec<f64>>> {
        Ok(read_key_weights(path.as_ref())?.key_weights)
    }
}

fn read_key_weights(path: &std::path::Path) -> Result<KeyWeightsFile> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let f: KeyWeightsFile = serde_json::from_str(&text)?;
    if f.key_weights.iter().any(|w| w.len() != f.blendshapes) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "key weight length differs from blendshape count".into(),
        });
    }
    Ok(f)
}

/// Blendshapes of one identity: shape `e` is the model evaluated at expression row `e`.
/// Row 0 is the neutral. Key weights are solved with every expression shape as a key.
pub fn generate_blendshapes(m: &BilinearModel, w_id: &[f64]) -> Result<BlendshapeRig> {
    let mut meshes = (0..m.expressions())
        .map(|e| m.synthesize_mesh(w_id, m.exp_row(e).as_slice()))
        .collect::<Result<Vec<_>>>()?;
    let shapes = meshes.split_off(1);
    let mut rig = BlendshapeRig {
        neutral: meshes.pop().expect("at least one expression"),
        shapes,
        key_weights: Vec::new(),
    };
    rig.key_weights = solve_key_weights(&rig, &rig.shapes)?;
    Ok(rig)
}

/// Box-constrained least squares `min ‖e₀ + Bα − key‖²`, `0 ≤ α ≤ 1`, per key mesh.
pub fn solve_key_weights(rig: &BlendshapeRig, key_meshes: &[Mesh]) -> Result<Vec<Vec<f64>>> {
    for k in key_meshes {
        if !k.same_topology(&rig.neutral) {
            return Err(Error::TopologyMismatch);
        }
    }
    let deltas = rig.deltas();
    let m = deltas.len();
    let gram = DMatrix::from_fn(m, m, |a, b| deltas[a].iter().zip(&deltas[b]).map(|(x, y)| x * y).sum());
    let e0 = rig.neutral.flatten();
    key_meshes
        .iter()
        .map(|key| {
            let r: Vec<f64> = key.flatten().iter().zip(&e0).map(|(a, b)| a - b).collect();
            let h = DVector::from_iterator(m, deltas.iter().map(|d| d.iter().zip(&r).map(|(x, y)| x * y).sum()));
            Ok(box_least_squares(&gram, &h).as_slice().to_vec())
        })
        .collect()
}

fn project(x: &DVector<f64>) -> DVector<f64> {
    x.map(|v| v.clamp(0.0, 1.0))
}

fn kkt_residual(g: &DMatrix<f64>, h: &DVector<f64>, x: &DVector<f64>, step: f64) -> f64 {
    let grad = g * x - h;
    (x - project(&(x - grad * step))).amax()
}

/// `min ½xᵀGx − hᵀx` over the unit box: accelerated projected gradient with
/// restarts, then an exact solve on the detected free set when that is feasible.
fn box_least_squares(g: &DMatrix<f64>, h: &DVector<f64>) -> DVector<f64> {
    let m = h.len();
    let lip = SymmetricEigen::new(g.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(0.0, f64::max);
    if m == 0 || lip <= 0.0 {
        return DVector::zeros(m);
    }
    let step = 1.0 / lip;
    let obj = |x: &DVector<f64>| 0.5 * x.dot(&(g * x)) - h.dot(x);
    let mut x = DVector::zeros(m);
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut fx = obj(&x);
    for _ in 0..MAX_PG_ITERATIONS {
        let next = project(&(&y - (g * &y - h) * step));
        let fn_ = obj(&next);
        if fn_ > fx {
            // restart momentum
            y = x.clone();
            t = 1.0;
            continue;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        y = &next + (&next - &x) * ((t - 1.0) / t_next);
        x = next;
        fx = fn_;
        t = t_next;
        if kkt_residual(g, h, &x, step) < KKT_TOLERANCE {
            break;
        }
    }
    polish(g, h, &x, step).unwrap_or(x)
}

fn polish(g: &DMatrix<f64>, h: &DVector<f64>, x: &DVector<f64>, step: f64) -> Option<DVector<f64>> {
    let eps = 1e-6;
    let free: Vec<usize> = (0..x.len()).filter(|&j| x[j] > eps && x[j] < 1.0 - eps).collect();
    let mut out = x.map(|v| {
        if v <= eps {
            0.0
        } else if v >= 1.0 - eps {
            1.0
        } else {
            v
        }
    });
    if !free.is_empty() {
        let gff = DMatrix::from_fn(free.len(), free.len(), |a, b| g[(free[a], free[b])]);
        let rhs = DVector::from_fn(free.len(), |a, _| {
            let j = free[a];
            h[j] - (0..x.len())
                .filter(|k| !free.contains(k))
                .map(|k| g[(j, k)] * out[k])
                .sum::<f64>()
        });
        let sol = gff.cholesky()?.solve(&rhs);
        for (a, &j) in free.iter().enumerate() {
            out[j] = sol[a];
        }
    }
    let feasible = out.iter().all(|&v| (0.0..=1.0).contains(&v));
    let obj = |x: &DVector<f64>| 0.5 * x.dot(&(g * x)) - h.dot(x);
    (feasible
        && kkt_residual(g, h, &out, step) <= kkt_residual(g, h, x, step).max(KKT_TOLERANCE)
        && obj(&out) <= obj(x) + 1e-12 * obj(x).abs().max(1.0))
    .then_some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::fixtures;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};

    fn random_rig(seed: u64, shapes: usize) -> BlendshapeRig {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let neutral = fixtures::icosphere(20.0, 1);
        let shapes = (0..shapes)
            .map(|_| {
                neutral.with_vertices(
                    neutral
                        .vertices
                        .iter()
                        .map(|v| {
                            v + Vector3::new(
                                rng.random_range(-2.0..2.0),
                                rng.random_range(-2.0..2.0),
                                rng.random_range(-2.0..2.0),
                            )
                        })
                        .collect(),
                )
            })
            .collect();
        BlendshapeRig {
            neutral,
            shapes,
            key_weights: vec![],
        }
    }

    #[test]
    fn neutral_key_gives_zero_weights() {
        let rig = random_rig(1, 6);
        let w = solve_key_weights(&rig, &[rig.neutral.clone()]).unwrap();
        assert!(w[0].iter().all(|&a| a.abs() < 1e-12));
    }

    #[test]
    fn blendshape_key_gives_one_hot() {
        let rig = random_rig(2, 6);
        // deltas are independent: the Gram matrix is positive definite
        let d = rig.deltas();
        let g = DMatrix::from_fn(6, 6, |a, b| d[a].iter().zip(&d[b]).map(|(x, y)| x * y).sum::<f64>());
        assert!(g.cholesky().is_some());
        let w = solve_key_weights(&rig, &rig.shapes).unwrap();
        for (j, wj) in w.iter().enumerate() {
            for (k, a) in wj.iter().enumerate() {
                let expect = if j == k { 1.0 } else { 0.0 };
                assert!((a - expect).abs() < 1e-6, "{wj:?}");
            }
        }
    }

    #[test]
    fn half_blend_is_recovered() {
        let rig = random_rig(3, 5);
        let key = rig.evaluate(&[0.0, 0.0, 0.5, 0.0, 0.0]).unwrap();
        let w = solve_key_weights(&rig, &[key]).unwrap();
        assert!((w[0][2] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn bounds_hold_for_unreachable_keys() {
        let rig = random_rig(4, 5);
        let key = rig.evaluate(&[2.0, -1.0, 0.3, 0.0, 0.7]).unwrap();
        let w = solve_key_weights(&rig, &[key]).unwrap();
        assert!(w[0].iter().all(|&a| (0.0..=1.0).contains(&a)));
        // first-order optimality on the box
        let d = rig.deltas();
        let r: Vec<f64> = key_residual(&rig, &w[0]);
        for (j, dj) in d.iter().enumerate() {
            let grad: f64 = dj.iter().zip(&r).map(|(x, y)| x * y).sum();
            let a = w[0][j];
            if a > 1e-9 && a < 1.0 - 1e-9 {
                assert!(grad.abs() < 1e-6, "free {j}: {grad}");
            } else if a <= 1e-9 {
                assert!(grad > -1e-6);
            } else {
                assert!(grad < 1e-6);
            }
        }
    }

    fn key_residual(rig: &BlendshapeRig, w: &[f64]) -> Vec<f64> {
        let key = rig.evaluate(&[2.0, -1.0, 0.3, 0.0, 0.7]).unwrap().flatten();
        let fit = rig.evaluate(w).unwrap().flatten();
        fit.iter().zip(&key).map(|(a, b)| a - b).collect()
    }

    #[test]
    fn zero_and_one_hot_weights_are_exact() {
        let rig = random_rig(6, 3);
        assert_eq!(rig.evaluate(&[0.0; 3]).unwrap().vertices, rig.neutral.vertices);
        for j in 0..3 {
            let mut a = [0.0; 3];
            a[j] = 1.0;
            assert_eq!(rig.evaluate(&a).unwrap().vertices, rig.shapes[j].vertices);
        }
    }

    #[test]
    fn rig_directory_round_trip() {
        let rig = random_rig(6, 3);
        let dir = tempfile::tempdir().unwrap();
        rig.save(dir.path()).unwrap();
        let back = BlendshapeRig::load(dir.path()).unwrap();
        assert_eq!(back.neutral.vertices, rig.neutral.vertices);
        assert_eq!(back.shapes.len(), 3);
        assert_eq!(back.shapes[2].vertices, rig.shapes[2].vertices);
        assert_eq!(back.key_weights, rig.key_weights);
        std::fs::remove_file(dir.path().join("blendshape_03.ply")).unwrap();
        assert!(matches!(BlendshapeRig::load(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn topology_mismatch() {
        let rig = random_rig(5, 2);
        assert!(matches!(
            solve_key_weights(&rig, &[fixtures::plane(3, 1.0)]),
            Err(Error::TopologyMismatch)
        ));
    }
}
