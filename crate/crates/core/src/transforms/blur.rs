//! Blur kernels and convolution with edge-replicate padding. All kernels
//! are normalized to sum to one.

use serde::{Deserialize, Serialize};

use crate::imaging::{sharpness_stats, ImageRgb, SharpnessStats};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Blur {
    Gaussian { sigma: f64 },
    Motion { length: usize, angle_deg: f64 },
    Defocus { radius: f64 },
}

/// Square kernel of side `2 * radius + 1`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel2d {
    pub radius: usize,
    pub weights: Vec<f64>,
}

impl Kernel2d {
    fn normalized(radius: usize, mut weights: Vec<f64>) -> Self {
        let s: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= s);
        Self { radius, weights }
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Sampled gaussian truncated at `ceil(3 sigma)`; `[1.0]` for sigma 0.
pub fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let w: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Box of `length` taps along direction `angle_deg`, each tap deposited
/// bilinearly onto the pixel grid.
pub fn motion_kernel(length: usize, angle_deg: f64) -> Kernel2d {
    let length = length.max(1);
    let half = (length as f64 - 1.0) / 2.0;
    let radius = half.ceil() as usize + 1;
    let side = 2 * radius + 1;
    let mut w = vec![0.0; side * side];
    let (s, c) = angle_deg.to_radians().sin_cos();
    for i in 0..length {
        let t = i as f64 - half;
        let x = t * c + radius as f64;
        let y = t * s + radius as f64;
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        for (dx, dy, k) in [
            (0, 0, (1.0 - fx) * (1.0 - fy)),
            (1, 0, fx * (1.0 - fy)),
            (0, 1, (1.0 - fx) * fy),
            (1, 1, fx * fy),
        ] {
            let (xi, yi) = (x0 as usize + dx, y0 as usize + dy);
            if xi < side && yi < side {
                w[yi * side + xi] += k;
            }
        }
    }
    Kernel2d::normalized(radius, w)
}

/// Disk of the given radius with a one-pixel linear rim, so the kernel
/// varies continuously with the radius. Radius 0 is the identity.
pub fn disk_kernel(radius: f64) -> Kernel2d {
    let radius = radius.max(0.0);
    let r = (radius + 0.5).ceil() as usize;
    let side = 2 * r + 1;
    let mut w = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let dx = x as f64 - r as f64;
            let dy = y as f64 - r as f64;
            let d = (dx * dx + dy * dy).sqrt();
            w[y * side + x] = (radius + 0.5 - d).clamp(0.0, 1.0);
        }
    }
    Kernel2d::normalized(r, w)
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

pub fn convolve(img: &ImageRgb, k: &Kernel2d) -> ImageRgb {
    let (w, h) = (img.width(), img.height());
    let r = k.radius as isize;
    let side = 2 * k.radius + 1;
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for ky in 0..side {
                let sy = clamp_index(y as isize + ky as isize - r, h);
                for kx in 0..side {
                    let kv = k.weights[ky * side + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    let sx = clamp_index(x as isize + kx as isize - r, w);
                    let p = (sy * w + sx) * 3;
                    for c in 0..3 {
                        acc[c] += kv * src[p + c];
                    }
                }
            }
            out[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&acc);
        }
    }
    ImageRgb::from_clipped(w, h, out).expect("dimensions preserved")
}

pub fn convolve_separable(img: &ImageRgb, k: &[f64]) -> ImageRgb {
    if k.len() == 1 {
        return img.clone();
    }
    let (w, h) = (img.width(), img.height());
    let r = (k.len() / 2) as isize;
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for (i, kv) in k.iter().enumerate() {
                    let off = i as isize - r;
                    let (sx, sy) = if horizontal {
                        (clamp_index(x as isize + off, w), y)
                    } else {
                        (x, clamp_index(y as isize + off, h))
                    };
                    let p = (sy * w + sx) * 3;
                    for c in 0..3 {
                        acc[c] += kv * src[p + c];
                    }
                }
                out[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&acc);
            }
        }
        out
    };
    let tmp = pass(img.data(), true);
    ImageRgb::from_clipped(w, h, pass(&tmp, false)).expect("dimensions preserved")
}

pub fn gaussian_blur(img: &ImageRgb, sigma: f64) -> ImageRgb {
    convolve_separable(img, &gaussian_kernel_1d(sigma))
}

pub fn apply_blur(img: &ImageRgb, blur: &Blur) -> ImageRgb {
    match *blur {
        Blur::Gaussian { sigma } => gaussian_blur(img, sigma),
        Blur::Motion { length, angle_deg } => {
            if length <= 1 {
                img.clone()
            } else {
                convolve(img, &motion_kernel(length, angle_deg))
            }
        }
        Blur::Defocus { radius } => {
            if radius <= 0.0 {
                img.clone()
            } else {
                convolve(img, &disk_kernel(radius))
            }
        }
    }
}

pub const MAX_BLUR_SIGMA: f64 = 5.0;
const REFERENCE_SIDE: usize = 48;

/// Fixed texture used to map a sharpness ratio onto a gaussian sigma:
/// deterministic hash noise, lightly smoothed so its spectrum is closer to
/// a natural image than white noise.
pub fn reference_texture() -> ImageRgb {
    let noise = ImageRgb::from_fn(REFERENCE_SIDE, REFERENCE_SIDE, |x, y| {
        let h = crate::seed::derive_seed(0x5EED, &[x as u64, y as u64]);
        let v = (h >> 11) as f64 / (1u64 << 53) as f64;
        [v, v, v]
    })
    .expect("valid reference");
    gaussian_blur(&noise, 0.7)
}

fn lap_var(img: &ImageRgb) -> f64 {
    sharpness_stats(img)
        .map(|s| s.laplacian_variance)
        .unwrap_or(0.0)
}

/// Gaussian sigma whose blur reduces the reference texture's Laplacian
/// variance by the target/source ratio. Never sharpens: a target at least
/// as sharp as the source gives 0. Clamped to `[0, MAX_BLUR_SIGMA]`.
pub fn estimate_blur_strength(source: &SharpnessStats, target: &SharpnessStats) -> f64 {
    if source.laplacian_variance <= 0.0 || target.laplacian_variance >= source.laplacian_variance {
        return 0.0;
    }
    let want = target.laplacian_variance / source.laplacian_variance;
    let reference = reference_texture();
    let base = lap_var(&reference);
    let ratio = |sigma: f64| lap_var(&gaussian_blur(&reference, sigma)) / base;
    if ratio(MAX_BLUR_SIGMA) >= want {
        return MAX_BLUR_SIGMA;
    }
    let (mut lo, mut hi) = (0.0, MAX_BLUR_SIGMA);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if ratio(mid) > want {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
