//! RGB images as `[1, 3, H, W]` tensors in `[0, 1]`, and PNG/CSV output helpers.

use std::fs;
use std::path::Path;

use argb_nn::{Scalar, Tensor};
use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{ArgbError, Result};

/// An RGB image with values in `[0, 1]`, stored as a `[1, 3, H, W]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    tensor: Tensor<f32>,
}

impl Image {
    pub fn new(tensor: Tensor<f32>) -> Result<Self> {
        check_image_batch(&tensor)?;
        if tensor.batch() != 1 {
            return Err(ArgbError::shape(format!(
                "expected one image, got batch {}",
                tensor.batch()
            )));
        }
        if tensor.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(ArgbError::invalid("image values must lie in [0, 1]"));
        }
        Ok(Self { tensor })
    }

    /// Clamps into `[0, 1]` instead of rejecting out-of-range values.
    pub fn from_clamped(tensor: Tensor<f32>) -> Result<Self> {
        check_image_batch(&tensor)?;
        Self::new(tensor.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn constant(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self {
            tensor: Tensor::from_fn([1, 3, height, width], |_, c, _, _| rgb[c].clamp(0.0, 1.0)),
        }
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let tensor = Tensor::from_fn([1, 3, h as usize, w as usize], |_, c, y, x| {
            f32::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
        });
        Self { tensor }
    }

    /// Rounds to the nearest 8-bit level per channel.
    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = (self.height(), self.width());
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| quantize(self.tensor.at(0, c, y as usize, x as usize));
            Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(ArgbError::missing(path, "image file not found"));
        }
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.tensor.height()
    }

    pub fn width(&self) -> usize {
        self.tensor.width()
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.tensor
    }

    /// Crop with top-left corner `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Result<Self> {
        if y + height > self.height() || x + width > self.width() {
            return Err(ArgbError::invalid(format!(
                "crop {height}x{width} at ({y},{x}) exceeds {}x{}",
                self.height(),
                self.width()
            )));
        }
        Ok(Self {
            tensor: Tensor::from_fn([1, 3, height, width], |_, c, yy, xx| {
                self.tensor.at(0, c, y + yy, x + xx)
            }),
        })
    }

    /// Quantizes every channel to 8 bits and back.
    pub fn quantized(&self) -> Self {
        Self {
            tensor: self.tensor.map(|v| f32::from(quantize(v)) / 255.0),
        }
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Validates a `[N, 3, H, W]` batch of finite values.
pub fn check_image_batch<T: Scalar>(t: &Tensor<T>) -> Result<()> {
    if t.channels() != 3 {
        return Err(ArgbError::shape(format!(
            "expected 3 color channels, got {}",
            t.channels()
        )));
    }
    if t.height() == 0 || t.width() == 0 || t.batch() == 0 {
        return Err(ArgbError::shape(format!("empty image tensor {:?}", t.shape())));
    }
    if !t.all_finite() {
        return Err(ArgbError::invalid("image contains non-finite values"));
    }
    Ok(())
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

/// Writes rows of floats as CSV with a header. Values use Rust's shortest
/// round-trip formatting so the file parses back to identical `f32`/`f64`.
pub fn write_csv<V: std::fmt::Display>(path: &Path, header: &[&str], rows: &[Vec<V>]) -> Result<()> {
    ensure_parent(path)?;
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(ToString::to_string).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parses a numeric CSV written by [`write_csv`], returning header and rows.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path).map_err(|e| ArgbError::missing(path, e.to_string()))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| ArgbError::invalid(format!("{} is empty", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .map(|c| {
                    c.parse::<f64>()
                        .map_err(|e| ArgbError::invalid(format!("bad number `{c}`: {e}")))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_fn([1, 3, 4, 5], |_, c, y, x| {
            ((c * 31 + y * 7 + x * 13) % 256) as f32 / 255.0
        });
        let img = Image::new(t).unwrap();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        let back = Image::load(&p).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn rejects_wrong_channels_and_range() {
        assert!(Image::new(Tensor::zeros([1, 4, 2, 2])).is_err());
        assert!(Image::new(Tensor::full([1, 3, 2, 2], 1.5)).is_err());
        assert!(Image::new(Tensor::full([1, 3, 2, 2], f32::NAN)).is_err());
    }

    #[test]
    fn missing_file_is_missing_input() {
        let err = Image::load(Path::new("/nonexistent/x.png")).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}

/// Line plot of several `(x, y)` series on shared, auto-scaled axes.
pub fn plot_series(path: &Path, series: &[(&[(f64, f64)], [u8; 3])]) -> Result<()> {
    let (w, h, margin) = (640u32, 400u32, 24u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let pts = series
        .iter()
        .flat_map(|(s, _)| s.iter())
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let (sx, sy) = ((x1 - x0).max(1e-300), (y1 - y0).max(1e-300));
    let (pw, ph) = (f64::from(w - 2 * margin), f64::from(h - 2 * margin));
    let to_px = |x: f64, y: f64| {
        (
            f64::from(margin) + (x - x0) / sx * pw,
            f64::from(h - margin) - (y - y0) / sy * ph,
        )
    };
    for x in margin..w - margin {
        img.put_pixel(x, h - margin, Rgb([0, 0, 0]));
    }
    for y in margin..h - margin {
        img.put_pixel(margin, y, Rgb([0, 0, 0]));
    }
    for (s, color) in series {
        for pair in s.windows(2) {
            let (a, b) = (to_px(pair[0].0, pair[0].1), to_px(pair[1].0, pair[1].1));
            let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
            for i in 0..=n {
                let t = i as f64 / n as f64;
                let (px, py) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
                if px >= 0.0 && py >= 0.0 && (px as u32) < w && (py as u32) < h {
                    img.put_pixel(px as u32, py as u32, Rgb(*color));
                }
            }
        }
        for &(x, y) in s.iter() {
            let (px, py) = to_px(x, y);
            for dy in -2i64..=2 {
                for dx in -2i64..=2 {
                    let (qx, qy) = (px as i64 + dx, py as i64 + dy);
                    if qx >= 0 && qy >= 0 && (qx as u32) < w && (qy as u32) < h {
                        img.put_pixel(qx as u32, qy as u32, Rgb(*color));
                    }
                }
            }
        }
    }
    ensure_parent(path)?;
    img.save(path)?;
    Ok(())
}
