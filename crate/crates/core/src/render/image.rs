use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// Linear RGB image, row-major, values nominally in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Vector3<f64>>,
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    let c = c.clamp(0.0, 1.0);
    if c <= 0.003_130_8 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

impl LinearImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![Vector3::zeros(); width * height],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Vector3<f64> {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: Vector3<f64>) {
        self.pixels[row * self.width + col] = v;
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at `+0.5`),
    /// clamped at the border.
    pub fn sample(&self, x: f64, y: f64) -> Vector3<f64> {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (c0, r0) = (fx.floor() as usize, fy.floor() as usize);
        let (c1, r1) = ((c0 + 1).min(self.width - 1), (r0 + 1).min(self.height - 1));
        let (tx, ty) = (fx - c0 as f64, fy - r0 as f64);
        let top = self.get(r0, c0) * (1.0 - tx) + self.get(r0, c1) * tx;
        let bottom = self.get(r1, c0) * (1.0 - tx) + self.get(r1, c1) * tx;
        top * (1.0 - ty) + bottom * ty
    }

    /// Reads PNG or JPEG and decodes sRGB to linear.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let img = image::open(path)?.to_rgb32f();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels = img
            .pixels()
            .map(|p| Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64).map(srgb_to_linear))
            .collect();
        Ok(Self {
            width: w,
            height: h,
            pixels,
        })
    }

    /// Writes an 8-bit sRGB PNG.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for (o, p) in out.pixels_mut().zip(&self.pixels) {
            *o = image::Rgb([0, 1, 2].map(|c| (linear_to_srgb(p[c]) * 255.0).round() as u8));
        }
        out.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// Peak signal-to-noise ratio (peak 1) over pixels where `mask` is set.
pub fn psnr(a: &LinearImage, b: &LinearImage, mask: Option<&[bool]>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (p, q)) in a.pixels.iter().zip(&b.pixels).enumerate() {
        if mask.is_none_or(|m| m[i]) {
            sum += (p - q).norm_squared();
            n += 3;
        }
    }
    if n == 0 || sum == 0.0 {
        return f64::INFINITY;
    }
    -10.0 * (sum / n as f64).log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn srgb_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = LinearImage::new(4, 3);
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = Vector3::new(i as f64 / 12.0, 0.5, 1.0 - i as f64 / 12.0);
        }
        let path = dir.path().join("a.png");
        img.save(&path).unwrap();
        let back = LinearImage::load(&path).unwrap();
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            assert!((a - b).amax() < 0.01);
        }
        assert!(matches!(
            LinearImage::load(dir.path().join("none.png")),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn sample_at_pixel_center_is_exact() {
        let mut img = LinearImage::new(3, 3);
        img.set(1, 2, Vector3::new(0.2, 0.4, 0.6));
        assert_eq!(img.sample(2.5, 1.5), Vector3::new(0.2, 0.4, 0.6));
        assert!((img.sample(2.0, 1.5) - Vector3::new(0.1, 0.2, 0.3)).norm() < 1e-15);
    }

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let a = LinearImage::new(2, 2);
        assert!(psnr(&a, &a, None).is_infinite());
        let mut b = a.clone();
        b.pixels[0] = Vector3::repeat(0.1);
        assert!((psnr(&a, &b, None) - 26.020599913279625).abs() < 1e-9);
    }
}
