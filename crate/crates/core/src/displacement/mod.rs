//! UV-space displacement maps over a base mesh: baking from a detailed scan,
//! reconstruction, quantized storage.

mod bake;

use std::path::{Path, PathBuf};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub use bake::{
    apply_displacement, bake_displacement, mesh_storage_bytes, representation_error, RepresentationError,
    BAKE_MAX_DISTANCE,
};

/// Resolutions accepted by the baker.
pub const RESOLUTIONS: [usize; 5] = [256, 512, 1024, 2048, 4096];

/// `N×N` grid of signed offsets (mm) along base normals.
///
/// Pixel `(r, c)` covers the UV square whose center is `((c+½)/N, (r+½)/N)`;
/// rows grow with `v`. Invalid pixels carry no information.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementMap<T: Real> {
    resolution: usize,
    values: Vec<T>,
    valid: Vec<bool>,
}

impl<T: Real> DisplacementMap<T> {
    /// All-invalid map.
    pub fn empty(resolution: usize) -> Self {
        Self {
            resolution,
            values: vec![T::zero(); resolution * resolution],
            valid: vec![false; resolution * resolution],
        }
    }

    pub fn constant(resolution: usize, value: T) -> Self {
        Self {
            resolution,
            values: vec![value; resolution * resolution],
            valid: vec![true; resolution * resolution],
        }
    }

    /// Values under invalid pixels are replaced by zero.
    pub fn from_parts(resolution: usize, mut values: Vec<T>, valid: Vec<bool>) -> Result<Self> {
        let n = resolution * resolution;
        if values.len() != n || valid.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: values.len().min(valid.len()),
            });
        }
        if values.iter().zip(&valid).any(|(v, &ok)| ok && !v.is_finite()) {
            return Err(Error::Invalid("non-finite value in a valid pixel".into()));
        }
        for (v, _) in values.iter_mut().zip(&valid).filter(|(_, ok)| !**ok) {
            *v = T::zero();
        }
        Ok(Self {
            resolution,
            values,
            valid,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Option<T> {
        let k = row * self.resolution + col;
        self.valid[k].then(|| self.values[k])
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: Option<T>) {
        let k = row * self.resolution + col;
        self.valid[k] = value.is_some();
        self.values[k] = value.unwrap_or(T::zero());
    }

    pub fn pixel_uv(&self, row: usize, col: usize) -> Vector2<T> {
        let n = T::of(self.resolution as f64);
        Vector2::new(
            (T::of(col as f64) + T::of(0.5)) / n,
            (T::of(row as f64) + T::of(0.5)) / n,
        )
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Bilinear sample at `uv`; weights are renormalized over the valid
    /// neighbors and a neighborhood with no valid pixel yields 0.
    pub fn sample(&self, uv: Vector2<T>) -> T {
        let n = self.resolution as isize;
        let x = uv.x.f64() * n as f64 - 0.5;
        let y = uv.y.f64() * n as f64 - 0.5;
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let clamp = |i: isize| i.clamp(0, n - 1) as usize;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let taps = [
            (y0, x0, (1.0 - fx) * (1.0 - fy)),
            (y0, x0 + 1, fx * (1.0 - fy)),
            (y0 + 1, x0, (1.0 - fx) * fy),
            (y0 + 1, x0 + 1, fx * fy),
        ];
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for (r, c, w) in taps {
            if w <= 0.0 {
                continue;
            }
            if let Some(v) = self.get(clamp(r), clamp(c)) {
                acc += w * v.f64();
                wsum += w;
            }
        }
        if wsum > 0.0 {
            T::of(acc / wsum)
        } else {
            T::zero()
        }
    }

    /// Min and max over valid pixels.
    pub fn range(&self) -> Option<(T, T)> {
        self.values
            .iter()
            .zip(&self.valid)
            .filter(|(_, &ok)| ok)
            .fold(None, |acc, (&v, _)| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            })
    }

    pub fn convert<U: Real>(&self) -> DisplacementMap<U> {
        DisplacementMap {
            resolution: self.resolution,
            values: self.values.iter().map(|v| U::of(v.f64())).collect(),
            valid: self.valid.clone(),
        }
    }

    /// 16-bit encoding: `q = 0` marks invalid, otherwise `value = offset + scale·(q−1)`.
    pub fn quantize(&self) -> QuantizedMap {
        let (lo, hi) = self.range().map_or((0.0, 0.0), |(lo, hi)| (lo.f64(), hi.f64()));
        let scale = (hi - lo) / (u16::MAX as f64 - 1.0);
        let data = self
            .values
            .iter()
            .zip(&self.valid)
            .map(|(&v, &ok)| {
                if !ok {
                    0
                } else if scale == 0.0 {
                    1
                } else {
                    (((v.f64() - lo) / scale).round() as i64 + 1).clamp(1, u16::MAX as i64) as u16
                }
            })
            .collect();
        QuantizedMap {
            resolution: self.resolution,
            scale_mm: scale,
            offset_mm: lo,
            data,
        }
    }

    pub fn save(&self, png_path: impl AsRef<Path>) -> Result<()> {
        self.quantize().save(png_path)
    }

    pub fn load(png_path: impl AsRef<Path>) -> Result<Self> {
        Ok(QuantizedMap::load(png_path)?.dequantize())
    }
}

/// Stored form of a [`DisplacementMap`].
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedMap {
    pub resolution: usize,
    pub scale_mm: f64,
    pub offset_mm: f64,
    /// Row-major, row 0 at `v ≈ 0`.
    pub data: Vec<u16>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    resolution: usize,
    scale_mm: f64,
    offset_mm: f64,
    valid: String,
    v_axis: String,
}

/// Sidecar JSON path belonging to a map PNG.
pub fn sidecar_path(png_path: &Path) -> PathBuf {
    png_path.with_extension("json")
}

impl QuantizedMap {
    #[inline]
    pub fn decode(&self, q: u16) -> Option<f64> {
        (q != 0).then(|| self.offset_mm + self.scale_mm * (q as f64 - 1.0))
    }

    pub fn dequantize<T: Real>(&self) -> DisplacementMap<T> {
        let (values, valid) = self
            .data
            .iter()
            .map(|&q| match self.decode(q) {
                Some(v) => (T::of(v), true),
                None => (T::zero(), false),
            })
            .unzip();
        DisplacementMap {
            resolution: self.resolution,
            values,
            valid,
        }
    }

    /// Size of the raw 16-bit grid.
    pub fn byte_size(&self) -> usize {
        2 * self.data.len()
    }

    /// Grayscale 16-bit PNG with `v` pointing up (image row 0 is `v ≈ 1`), plus a JSON sidecar.
    pub fn save(&self, png_path: impl AsRef<Path>) -> Result<()> {
        let path = png_path.as_ref();
        let n = self.resolution;
        let mut flipped = Vec::with_capacity(self.data.len());
        for r in (0..n).rev() {
            flipped.extend_from_slice(&self.data[r * n..(r + 1) * n]);
        }
        let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(n as u32, n as u32, flipped)
            .ok_or_else(|| Error::Invalid("map buffer size".into()))?;
        img.save_with_format(path, image::ImageFormat::Png)?;
        let side = Sidecar {
            resolution: n,
            scale_mm: self.scale_mm,
            offset_mm: self.offset_mm,
            valid: "zero_sentinel".into(),
            v_axis: "up".into(),
        };
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(png_path: impl AsRef<Path>) -> Result<Self> {
        let path = png_path.as_ref();
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let side_path = sidecar_path(path);
        let text = std::fs::read_to_string(&side_path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(side_path.clone()),
            _ => Error::Io(e),
        })?;
        let side: Sidecar = serde_json::from_str(&text)?;
        let img = image::open(path)?.into_luma16();
        let n = side.resolution;
        if img.width() as usize != n || img.height() as usize != n {
            return Err(Error::ResolutionMismatch {
                expected: n,
                got: img.width() as usize,
            });
        }
        let raw = img.into_raw();
        let mut data = Vec::with_capacity(raw.len());
        for r in (0..n).rev() {
            data.extend_from_slice(&raw[r * n..(r + 1) * n]);
        }
        Ok(Self {
            resolution: n,
            scale_mm: side.scale_mm,
            offset_mm: side.offset_mm,
            data,
        })
    }
}
