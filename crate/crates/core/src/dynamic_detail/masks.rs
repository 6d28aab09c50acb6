use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::UvIndex;
use crate::morphable::BlendshapeRig;
use crate::scalar::Real;

/// Masks whose raw maximum falls below this are all zero.
pub const ACTIVATION_FLOOR: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskNormalization {
    /// Each mask divided by its own maximum.
    #[default]
    PerMask,
    /// All masks divided by the largest maximum.
    Global,
}

/// One UV-space motion-magnitude mask per blendshape, values in `[0,1]`.
///
/// Grids are row-major with the same pixel convention as displacement maps.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMaskSet<T: Real> {
    resolution: usize,
    masks: Vec<Vec<T>>,
    raw_max: Vec<T>,
}

impl<T: Real> ActivationMaskSet<T> {
    pub fn from_parts(resolution: usize, masks: Vec<Vec<T>>, raw_max: Vec<T>) -> Result<Self> {
        if masks.len() != raw_max.len() {
            return Err(Error::DimensionMismatch {
                expected: masks.len(),
                got: raw_max.len(),
            });
        }
        for m in &masks {
            if m.len() != resolution * resolution {
                return Err(Error::ResolutionMismatch {
                    expected: resolution,
                    got: (m.len() as f64).sqrt() as usize,
                });
            }
            if m.iter().any(|v| !(*v >= T::zero() && *v <= T::one())) {
                return Err(Error::Invalid("activation values must lie in [0,1]".into()));
            }
        }
        Ok(Self {
            resolution,
            masks,
            raw_max,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn masks(&self) -> &[Vec<T>] {
        &self.masks
    }

    /// Maximum motion magnitude (mm) of each mask before normalization.
    pub fn raw_max(&self) -> &[T] {
        &self.raw_max
    }

    pub fn convert<U: Real>(&self) -> ActivationMaskSet<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.f64())).collect::<Vec<U>>();
        ActivationMaskSet {
            resolution: self.resolution,
            masks: self.masks.iter().map(|m| conv(m)).collect(),
            raw_max: conv(&self.raw_max),
        }
    }
}

/// Per-pixel blending weights of the neutral (`m0`) and key-expression maps.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMaskSet<T: Real> {
    pub resolution: usize,
    pub m0: Vec<T>,
    pub mi: Vec<Vec<T>>,
}

/// Rasterizes `‖Bⱼ − e₀‖` into the UV atlas of the neutral and normalizes it.
pub fn compute_activation_masks(
    rig: &BlendshapeRig,
    resolution: usize,
    normalization: MaskNormalization,
) -> Result<ActivationMaskSet<f64>> {
    if resolution == 0 {
        return Err(Error::Invalid("mask resolution must be positive".into()));
    }
    if rig.shapes.iter().any(|s| !s.same_topology(&rig.neutral)) {
        return Err(Error::TopologyMismatch);
    }
    let atlas = UvIndex::build(&rig.neutral)?;
    let n = resolution;
    let located: Vec<Option<([usize; 3], [f64; 3])>> = (0..n * n)
        .into_par_iter()
        .map(|p| {
            let (r, c) = (p / n, p % n);
            let uv = nalgebra::Vector2::new((c as f64 + 0.5) / n as f64, (r as f64 + 0.5) / n as f64);
            atlas
                .locate(uv)
                .map(|(f, b)| (rig.neutral.faces()[f].map(|i| i as usize), b))
        })
        .collect();
    let raw: Vec<Vec<f64>> = rig
        .shapes
        .par_iter()
        .map(|shape| {
            let mag: Vec<f64> = shape
                .vertices
                .iter()
                .zip(&rig.neutral.vertices)
                .map(|(b, e)| (b - e).norm())
                .collect();
            located
                .iter()
                .map(|l| {
                    l.map_or(0.0, |(idx, b)| {
                        b[0] * mag[idx[0]] + b[1] * mag[idx[1]] + b[2] * mag[idx[2]]
                    })
                })
                .collect()
        })
        .collect();
    let raw_max: Vec<f64> = raw.iter().map(|m| m.iter().copied().fold(0.0, f64::max)).collect();
    let global = raw_max.iter().copied().fold(0.0, f64::max);
    let masks = raw
        .into_iter()
        .zip(&raw_max)
        .map(|(m, &own)| {
            let scale = match normalization {
                MaskNormalization::PerMask => own,
                MaskNormalization::Global => global,
            };
            if own < ACTIVATION_FLOOR || scale < ACTIVATION_FLOOR {
                vec![0.0; m.len()]
            } else {
                m.into_iter().map(|v| (v / scale).min(1.0)).collect()
            }
        })
        .collect();
    Ok(ActivationMaskSet {
        resolution,
        masks,
        raw_max,
    })
}

fn check_weights<T: Real>(w: &[T], expected: usize, what: &str) -> Result<()> {
    if w.len() != expected {
        return Err(Error::DimensionMismatch { expected, got: w.len() });
    }
    if w.iter().any(|a| !(*a >= T::zero() && *a <= T::one())) {
        return Err(Error::Invalid(format!("{what} entries must lie in [0,1]")));
    }
    Ok(())
}

/// `Mᵢ = clamp(Σⱼ αʲ α̂ᵢʲ Aⱼ, 0, 1)` and `M₀ = max(0, 1 − Σᵢ Mᵢ)`.
///
/// `Σᵢ Mᵢ` is accumulated in ascending order per pixel, so reordering the keys
/// permutes `mi` and leaves `m0` bit-identical.
pub fn compute_weight_masks<T: Real>(
    acts: &ActivationMaskSet<T>,
    alpha: &[T],
    key_weights: &[Vec<T>],
) -> Result<WeightMaskSet<T>> {
    let j_count = acts.len();
    check_weights(alpha, j_count, "blendshape weight")?;
    for k in key_weights {
        check_weights(k, j_count, "key weight")?;
    }
    let size = acts.resolution * acts.resolution;
    let mi: Vec<Vec<T>> = key_weights
        .par_iter()
        .map(|key| {
            let mut m = vec![T::zero(); size];
            for (j, mask) in acts.masks.iter().enumerate() {
                let c = alpha[j] * key[j];
                if c == T::zero() {
                    continue;
                }
                for (o, a) in m.iter_mut().zip(mask) {
                    *o += c * *a;
                }
            }
            m.iter_mut().for_each(|v| *v = v.max(T::zero()).min(T::one()));
            m
        })
        .collect();
    let m0 = (0..size)
        .into_par_iter()
        .map_init(Vec::new, |buf: &mut Vec<T>, p| {
            buf.clear();
            buf.extend(mi.iter().map(|m| m[p]));
            buf.sort_by(|a, b| a.partial_cmp(b).expect("finite weights"));
            let sum = buf.iter().fold(T::zero(), |s, v| s + *v);
            (T::one() - sum).max(T::zero())
        })
        .collect();
    Ok(WeightMaskSet {
        resolution: acts.resolution,
        m0,
        mi,
    })
}
