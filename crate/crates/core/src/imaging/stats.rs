use std::path::Path;

use serde::{Deserialize, Serialize};

use super::image::ImageRgb;
use super::lab::{rgb_to_lab, LabImage};
use crate::error::{Error, Result};

/// Per-channel population mean and standard deviation in L*a*b*.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessStats {
    pub laplacian_variance: f64,
    /// Mean Sobel gradient magnitude.
    pub tenengrad_mean: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageStats {
    pub color: ColorStats,
    pub sharpness: SharpnessStats,
}

/// Appearance statistics of a calibration subset.
///
/// JSON layout: `per_image` (list of `{color, sharpness}`),
/// `aggregate_color` (mean of per-image means, mean of per-image stds),
/// `aggregate_sharpness` (mean of per-image values) and
/// `source_image_count`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationProfile {
    pub per_image: Vec<ImageStats>,
    pub aggregate_color: ColorStats,
    pub aggregate_sharpness: SharpnessStats,
    pub source_image_count: usize,
}

pub fn color_stats(lab: &LabImage) -> ColorStats {
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for c in 0..3 {
        let (m, v) = mean_var(lab.pixels().map(move |p| p[c]));
        mean[c] = m;
        std[c] = v.sqrt();
    }
    ColorStats { mean, std }
}

pub const MIN_SHARPNESS_SIDE: usize = 3;

const LAPLACIAN: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];
const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

// All three kernels sum to zero, so taps are taken relative to the center
// pixel; a flat patch then responds with exactly 0.
fn respond(plane: &[f64], w: usize, x: usize, y: usize, k: &[[f64; 3]; 3]) -> f64 {
    let c = plane[(y + 1) * w + x + 1];
    let mut s = 0.0;
    for (dy, row) in k.iter().enumerate() {
        for (dx, kv) in row.iter().enumerate() {
            s += kv * (plane[(y + dy) * w + x + dx] - c);
        }
    }
    s
}

/// Population mean and variance, accumulated relative to the first value.
fn mean_var(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let mut it = values.clone();
    let Some(first) = it.next() else {
        return (0.0, 0.0);
    };
    let n = values.clone().count() as f64;
    let shift = values.clone().map(|v| v - first).sum::<f64>() / n;
    let var = values.map(|v| (v - first - shift).powi(2)).sum::<f64>() / n;
    (first + shift, var)
}

/// Laplacian variance and Tenengrad over the valid (unpadded) region of
/// the luma plane.
pub fn sharpness_stats(img: &ImageRgb) -> Result<SharpnessStats> {
    let (w, h) = (img.width(), img.height());
    if w < MIN_SHARPNESS_SIDE || h < MIN_SHARPNESS_SIDE {
        return Err(Error::TooSmall {
            width: w,
            height: h,
            min: MIN_SHARPNESS_SIDE,
        });
    }
    let luma = img.luma();
    let n = ((w - 2) * (h - 2)) as f64;
    let mut lap = Vec::with_capacity((w - 2) * (h - 2));
    let mut ten = 0.0;
    for y in 0..h - 2 {
        for x in 0..w - 2 {
            lap.push(respond(&luma, w, x, y, &LAPLACIAN));
            let gx = respond(&luma, w, x, y, &SOBEL_X);
            let gy = respond(&luma, w, x, y, &SOBEL_Y);
            ten += (gx * gx + gy * gy).sqrt();
        }
    }
    let (_, var) = mean_var(lap.iter().copied());
    Ok(SharpnessStats {
        laplacian_variance: var,
        tenengrad_mean: ten / n,
    })
}

pub fn image_stats(img: &ImageRgb) -> Result<ImageStats> {
    Ok(ImageStats {
        color: color_stats(&rgb_to_lab(img)),
        sharpness: sharpness_stats(img)?,
    })
}

fn aggregate(per_image: &[ImageStats]) -> (ColorStats, SharpnessStats) {
    let n = per_image.len() as f64;
    let mut color = ColorStats {
        mean: [0.0; 3],
        std: [0.0; 3],
    };
    let mut sharp = SharpnessStats {
        laplacian_variance: 0.0,
        tenengrad_mean: 0.0,
    };
    for s in per_image {
        for c in 0..3 {
            color.mean[c] += s.color.mean[c];
            color.std[c] += s.color.std[c];
        }
        sharp.laplacian_variance += s.sharpness.laplacian_variance;
        sharp.tenengrad_mean += s.sharpness.tenengrad_mean;
    }
    for c in 0..3 {
        color.mean[c] /= n;
        color.std[c] /= n;
    }
    sharp.laplacian_variance /= n;
    sharp.tenengrad_mean /= n;
    (color, sharp)
}

/// Mean sharpness over `images`; equals the `aggregate_sharpness` of
/// [`build_calibration_profile`] without computing color statistics.
pub fn mean_sharpness<'a, I>(images: I) -> Result<SharpnessStats>
where
    I: IntoIterator<Item = &'a ImageRgb>,
{
    let mut acc = SharpnessStats {
        laplacian_variance: 0.0,
        tenengrad_mean: 0.0,
    };
    let mut n = 0usize;
    for img in images {
        let s = sharpness_stats(img)?;
        acc.laplacian_variance += s.laplacian_variance;
        acc.tenengrad_mean += s.tenengrad_mean;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyCalibration);
    }
    acc.laplacian_variance /= n as f64;
    acc.tenengrad_mean /= n as f64;
    Ok(acc)
}

pub fn build_calibration_profile<'a, I>(images: I) -> Result<CalibrationProfile>
where
    I: IntoIterator<Item = &'a ImageRgb>,
{
    let per_image = images
        .into_iter()
        .map(image_stats)
        .collect::<Result<Vec<_>>>()?;
    CalibrationProfile::from_per_image(per_image)
}

impl CalibrationProfile {
    pub fn from_per_image(per_image: Vec<ImageStats>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::EmptyCalibration);
        }
        let (aggregate_color, aggregate_sharpness) = aggregate(&per_image);
        Ok(Self {
            source_image_count: per_image.len(),
            per_image,
            aggregate_color,
            aggregate_sharpness,
        })
    }

    /// Largest absolute difference between the stored aggregates and the
    /// aggregates recomputed from `per_image`.
    pub fn aggregate_drift(&self) -> f64 {
        if self.per_image.is_empty() {
            return f64::INFINITY;
        }
        let (c, s) = aggregate(&self.per_image);
        let mut d: f64 = 0.0;
        for i in 0..3 {
            d = d.max((c.mean[i] - self.aggregate_color.mean[i]).abs());
            d = d.max((c.std[i] - self.aggregate_color.std[i]).abs());
        }
        d = d.max((s.laplacian_variance - self.aggregate_sharpness.laplacian_variance).abs());
        d.max((s.tenengrad_mean - self.aggregate_sharpness.tenengrad_mean).abs())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: Self = serde_json::from_str(&text)?;
        if p.per_image.is_empty() || p.source_image_count != p.per_image.len() {
            return Err(Error::EmptyCalibration);
        }
        Ok(p)
    }
}
