use std::borrow::Cow;
use std::path::{Path, PathBuf};

use super::masks::{compute_weight_masks, ActivationMaskSet, WeightMaskSet};
use crate::displacement::{apply_displacement, sidecar_path, DisplacementMap, QuantizedMap};
use crate::error::{Error, Result};
use crate::morphable::BlendshapeRig;
use crate::scalar::Real;
use crate::Mesh;

/// Source of the neutral (`index 0`) and key-expression (`1..=key_count`) displacement maps.
pub trait DisplacementProvider<T: Real> {
    fn key_count(&self) -> usize;
    fn resolution(&self) -> usize;
    fn get(&self, index: usize) -> Result<Cow<'_, DisplacementMap<T>>>;
}

fn out_of_range(index: usize, key_count: usize) -> Error {
    Error::Invalid(format!("map index {index} beyond {key_count} keys"))
}

/// Maps held in memory.
#[derive(Clone, Debug)]
pub struct MapSetProvider<T: Real> {
    maps: Vec<DisplacementMap<T>>,
}

impl<T: Real> MapSetProvider<T> {
    pub fn new(maps: Vec<DisplacementMap<T>>) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Invalid("a neutral map is required".into()))?;
        let n = first.resolution();
        if let Some(m) = maps.iter().find(|m| m.resolution() != n) {
            return Err(Error::ResolutionMismatch {
                expected: n,
                got: m.resolution(),
            });
        }
        Ok(Self { maps })
    }

    pub fn maps(&self) -> &[DisplacementMap<T>] {
        &self.maps
    }
}

impl<T: Real> DisplacementProvider<T> for MapSetProvider<T> {
    fn key_count(&self) -> usize {
        self.maps.len() - 1
    }

    fn resolution(&self) -> usize {
        self.maps[0].resolution()
    }

    fn get(&self, index: usize) -> Result<Cow<'_, DisplacementMap<T>>> {
        self.maps
            .get(index)
            .map(Cow::Borrowed)
            .ok_or_else(|| out_of_range(index, self.key_count()))
    }
}

/// The same constant map for every key; with zero this adds no detail.
#[derive(Clone, Debug)]
pub struct ConstantProvider<T: Real> {
    map: DisplacementMap<T>,
    key_count: usize,
}

impl<T: Real> ConstantProvider<T> {
    pub fn new(resolution: usize, key_count: usize, value: T) -> Self {
        Self {
            map: DisplacementMap::constant(resolution, value),
            key_count,
        }
    }
}

impl<T: Real> DisplacementProvider<T> for ConstantProvider<T> {
    fn key_count(&self) -> usize {
        self.key_count
    }

    fn resolution(&self) -> usize {
        self.map.resolution()
    }

    fn get(&self, index: usize) -> Result<Cow<'_, DisplacementMap<T>>> {
        if index > self.key_count {
            return Err(out_of_range(index, self.key_count));
        }
        Ok(Cow::Borrowed(&self.map))
    }
}

/// Maps stored as `map_000.png` (neutral), `map_001.png`, … with their sidecars.
/// Files are read on demand.
#[derive(Clone, Debug)]
pub struct DirectoryProvider {
    files: Vec<PathBuf>,
    resolution: usize,
}

impl DirectoryProvider {
    pub fn file_name(index: usize) -> String {
        format!("map_{index:03}.png")
    }

    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::NotFound(dir.to_path_buf()));
        }
        let files: Vec<PathBuf> = (0..)
            .map(|i| dir.join(Self::file_name(i)))
            .take_while(|p| p.exists())
            .collect();
        if files.is_empty() {
            return Err(Error::NotFound(dir.join(Self::file_name(0))));
        }
        let mut resolution = None;
        for f in &files {
            let side = sidecar_path(f);
            let text = std::fs::read_to_string(&side).map_err(|_| Error::NotFound(side.clone()))?;
            let value: serde_json::Value = serde_json::from_str(&text)?;
            let n = value["resolution"].as_u64().ok_or_else(|| Error::Format {
                path: side.clone(),
                reason: "missing resolution".into(),
            })? as usize;
            match resolution {
                None => resolution = Some(n),
                Some(r) if r != n => return Err(Error::ResolutionMismatch { expected: r, got: n }),
                _ => {}
            }
        }
        Ok(Self {
            files,
            resolution: resolution.expect("at least one map"),
        })
    }

    /// Writes `maps` in the layout [`DirectoryProvider::open`] reads.
    pub fn write<T: Real>(dir: impl AsRef<Path>, maps: &[DisplacementMap<T>]) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (i, m) in maps.iter().enumerate() {
            m.save(dir.join(Self::file_name(i)))?;
        }
        Ok(())
    }
}

impl<T: Real> DisplacementProvider<T> for DirectoryProvider {
    fn key_count(&self) -> usize {
        self.files.len() - 1
    }

    fn resolution(&self) -> usize {
        self.resolution
    }

    fn get(&self, index: usize) -> Result<Cow<'_, DisplacementMap<T>>> {
        let path = self
            .files
            .get(index)
            .ok_or_else(|| out_of_range(index, self.files.len() - 1))?;
        let q = QuantizedMap::load(path)?;
        if q.resolution != self.resolution {
            return Err(Error::ResolutionMismatch {
                expected: self.resolution,
                got: q.resolution,
            });
        }
        Ok(Cow::Owned(q.dequantize()))
    }
}

/// `F = M₀⊙F̂₀ + Σᵢ Mᵢ⊙F̂ᵢ`.
///
/// Terms are added in key order per pixel. A term with zero weight is skipped;
/// an invalid provider pixel adds nothing. `F` is valid where at least one
/// weighted term is valid.
pub fn blend_displacement<T: Real>(
    provider: &dyn DisplacementProvider<T>,
    w: &WeightMaskSet<T>,
) -> Result<DisplacementMap<T>> {
    if provider.key_count() != w.mi.len() {
        return Err(Error::DimensionMismatch {
            expected: w.mi.len(),
            got: provider.key_count(),
        });
    }
    let n = w.resolution;
    if provider.resolution() != n {
        return Err(Error::ResolutionMismatch {
            expected: n,
            got: provider.resolution(),
        });
    }
    let mut values = vec![T::zero(); n * n];
    let mut valid = vec![false; n * n];
    for i in 0..=w.mi.len() {
        let weights = if i == 0 { &w.m0 } else { &w.mi[i - 1] };
        if weights.iter().all(|x| *x == T::zero()) {
            continue;
        }
        let map = provider.get(i)?;
        if map.resolution() != n {
            return Err(Error::ResolutionMismatch {
                expected: n,
                got: map.resolution(),
            });
        }
        for (p, (&wt, (&f, &ok))) in weights.iter().zip(map.values().iter().zip(map.valid())).enumerate() {
            if wt != T::zero() && ok {
                values[p] += wt * f;
                valid[p] = true;
            }
        }
    }
    DisplacementMap::from_parts(n, values, valid)
}

/// Detailed mesh for blendshape weights `alpha`: linear blendshape base plus
/// the mask-blended displacement, applied after `subdiv` Loop subdivisions.
pub fn rig_detailed_mesh(
    rig: &BlendshapeRig,
    alpha: &[f64],
    acts: &ActivationMaskSet<f64>,
    provider: &dyn DisplacementProvider<f64>,
    subdiv: usize,
) -> Result<Mesh> {
    let base = rig.evaluate(alpha)?;
    let w = compute_weight_masks(acts, alpha, &rig.key_weights)?;
    let f = blend_displacement(provider, &w)?;
    apply_displacement(&base, &f, subdiv)
}
