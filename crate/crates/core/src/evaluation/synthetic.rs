//! Procedural two-domain benchmark.
//!
//! Domain A draws class textures (blob, ring, stripes, ...) with a small
//! class-dependent a/b tint, symmetric about neutral, and
//! class-independent pixel speckle. Domain B
//! runs the same generator, then shifts each image's L*a*b* a/b means by
//! the configured offset plus a zero-mean per-image jitter and applies a
//! gaussian blur. Pixels are stored at 8-bit precision, so writing the
//! benchmark as PNG and loading it back is lossless.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_manifest, LabeledDataset, ManifestRow, Sample, Split};
use crate::error::{Error, Result};
use crate::imaging::{lab_to_srgb_unclipped, srgb_to_lab, ImageRgb};
use crate::seed::{rng_for, stream};
use crate::transforms::gaussian_blur;

pub const CLASS_NAMES: [&str; 6] = ["blob", "ring", "stripes", "checker", "cross", "dots"];
pub const MIN_SAMPLES_PER_CLASS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub size: usize,
    /// Added to the a and b channel means of every domain-B image.
    pub lab_offset: f64,
    /// Std of the zero-mean per-image a/b offset jitter in domain B.
    pub jitter: f64,
    pub blur_sigma: f64,
    /// Std of the per-pixel gray speckle of the generator.
    pub speckle: f64,
    /// Spacing of the class-dependent a/b tint of the generator; class `c`
    /// of `C` is tinted by `(c - (C-1)/2) * class_tint` on both a and b.
    pub class_tint: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            samples_per_class: 100,
            size: 32,
            lab_offset: 8.0,
            jitter: 2.0,
            blur_sigma: 1.0,
            speckle: 0.08,
            class_tint: 8.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_class < MIN_SAMPLES_PER_CLASS {
            return Err(Error::contract(format!(
                "samples per class must be >= {MIN_SAMPLES_PER_CLASS}, got {}",
                self.samples_per_class
            )));
        }
        if !(2..=CLASS_NAMES.len()).contains(&self.classes) {
            return Err(Error::contract(format!(
                "classes must be in 2..={}, got {}",
                CLASS_NAMES.len(),
                self.classes
            )));
        }
        if self.size < 8 {
            return Err(Error::contract("image size must be >= 8"));
        }
        if !(self.blur_sigma > 0.0 && self.jitter >= 0.0 && self.speckle >= 0.0) {
            return Err(Error::contract("blur_sigma must be > 0; jitter and speckle >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticBenchmark {
    pub config: SyntheticConfig,
    pub seed: u64,
    pub a: LabeledDataset,
    pub b: LabeledDataset,
}

/// Per-class split sizes: `round(0.7 n)` train, `round(0.15 n)` val, rest
/// test.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (0.7 * n as f64).round() as usize;
    let val = (0.15 * n as f64).round() as usize;
    (train, val, n - train - val)
}

fn smoothstep(edge: f64, x: f64) -> f64 {
    // 1 inside (x < -edge), 0 outside (x > edge)
    ((edge - x) / (2.0 * edge)).clamp(0.0, 1.0)
}

/// Foreground coverage in `[0, 1]` of class `class` at `(u, v)` in unit
/// coordinates, for a shape with parameters drawn once per image.
struct Shape {
    class: usize,
    cx: f64,
    cy: f64,
    r: f64,
    w: f64,
    angle: f64,
    period: f64,
    phase: f64,
}

impl Shape {
    fn draw(class: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            class,
            cx: rng.random_range(0.35..0.65),
            cy: rng.random_range(0.35..0.65),
            r: rng.random_range(0.16..0.26),
            w: rng.random_range(0.05..0.08),
            angle: rng.random_range(0.0..PI),
            period: rng.random_range(0.18..0.26),
            phase: rng.random_range(0.0..2.0 * PI),
        }
    }

    fn coverage(&self, u: f64, v: f64) -> f64 {
        let (dx, dy) = (u - self.cx, v - self.cy);
        let d = (dx * dx + dy * dy).sqrt();
        let edge = 0.02;
        let (ca, sa) = (self.angle.cos(), self.angle.sin());
        let along = dx * ca + dy * sa;
        let across = -dx * sa + dy * ca;
        match self.class {
            0 => smoothstep(edge, d - self.r),
            1 => smoothstep(edge, (d - self.r).abs() - self.w),
            2 => 0.5 + 0.5 * (2.0 * PI * along / self.period + self.phase).sin(),
            3 => {
                let s = self.period * 0.6;
                let (i, j) = ((along / s).floor() as i64, (across / s).floor() as i64);
                if (i + j).rem_euclid(2) == 0 {
                    1.0
                } else {
                    0.0
                }
            }
            4 => {
                let arm = self.r * 1.4;
                let bar = |a: f64, b: f64| smoothstep(edge, a.abs() - self.w).min(smoothstep(edge, b.abs() - arm));
                bar(along, across).max(bar(across, along))
            }
            _ => {
                let s = self.period;
                let fu = (along / s).rem_euclid(1.0) - 0.5;
                let fv = (across / s).rem_euclid(1.0) - 0.5;
                smoothstep(edge / s, (fu * fu + fv * fv).sqrt() - 0.22)
            }
        }
    }
}

/// One generator draw as unclipped interleaved RGB.
fn base_image(class: usize, size: usize, speckle: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let shape = Shape::draw(class, rng);
    let bg = rng.random_range(0.30..0.45);
    let contrast = rng.random_range(0.22..0.35);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.02..0.02));
    let noise = Normal::new(0.0, speckle.max(1e-12)).expect("positive std");
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64;
            let v = (y as f64 + 0.5) / size as f64;
            let n = if speckle > 0.0 { noise.sample(rng) } else { 0.0 };
            let g = bg + contrast * shape.coverage(u, v) + n;
            for t in tint {
                data.push(g + t);
            }
        }
    }
    data
}

fn quantize(img: &ImageRgb) -> ImageRgb {
    let data = img.data().iter().map(|v| (v * 255.0).round() / 255.0).collect();
    ImageRgb::new(img.width(), img.height(), data).expect("quantized values stay in range")
}

fn shift_ab(data: &[f64], da: f64, db: f64) -> Vec<f64> {
    data.chunks_exact(3)
        .flat_map(|p| {
            let mut lab = srgb_to_lab([p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0), p[2].clamp(0.0, 1.0)]);
            lab[1] += da;
            lab[2] += db;
            lab_to_srgb_unclipped(lab)
        })
        .collect()
}

fn domain(cfg: &SyntheticConfig, seed: u64, which: u64, name: &str) -> Result<LabeledDataset> {
    let classes: Vec<String> = CLASS_NAMES[..cfg.classes].iter().map(|s| s.to_string()).collect();
    let (n_train, n_val, _) = split_sizes(cfg.samples_per_class);
    let jitter = Normal::new(0.0, cfg.jitter.max(1e-12)).expect("positive std");
    let mut samples = Vec::with_capacity(cfg.classes * cfg.samples_per_class);
    for class in 0..cfg.classes {
        let mut splits: Vec<Split> = (0..cfg.samples_per_class)
            .map(|i| match i {
                i if i < n_train => Split::Train,
                i if i < n_train + n_val => Split::Val,
                _ => Split::Test,
            })
            .collect();
        splits.shuffle(&mut rng_for(seed, &[stream::SYNTH, which, class as u64, u64::MAX]));
        for (i, split) in splits.into_iter().enumerate() {
            let mut rng = rng_for(seed, &[stream::SYNTH, which, class as u64, i as u64]);
            let mut data = base_image(class, cfg.size, cfg.speckle, &mut rng);
            let tint = (class as f64 - (cfg.classes - 1) as f64 / 2.0) * cfg.class_tint;
            let img = if which == 0 {
                data = shift_ab(&data, tint, tint);
                ImageRgb::from_clipped(cfg.size, cfg.size, data)?
            } else {
                let (ja, jb) = if cfg.jitter > 0.0 {
                    (jitter.sample(&mut rng), jitter.sample(&mut rng))
                } else {
                    (0.0, 0.0)
                };
                data = shift_ab(&data, tint + cfg.lab_offset + ja, tint + cfg.lab_offset + jb);
                gaussian_blur(&ImageRgb::from_clipped(cfg.size, cfg.size, data)?, cfg.blur_sigma)
            };
            samples.push(Sample {
                image: Arc::new(quantize(&img)),
                label: class,
                split,
            });
        }
    }
    LabeledDataset::new(name, classes, samples)
}

pub fn generate_synthetic_benchmark(seed: u64, cfg: &SyntheticConfig) -> Result<SyntheticBenchmark> {
    cfg.validate()?;
    Ok(SyntheticBenchmark {
        config: cfg.clone(),
        seed,
        a: domain(cfg, seed, 0, "domain_a")?,
        b: domain(cfg, seed, 1, "domain_b")?,
    })
}

/// Writes `<dir>/<domain>/<split>/<class>_<index>.png` and one manifest
/// `<dir>/<domain>_<split>.csv` per domain and split. Returns the
/// manifest paths.
pub fn write_benchmark(bench: &SyntheticBenchmark, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut manifests = Vec::new();
    for ds in [&bench.a, &bench.b] {
        for split in Split::ALL {
            let sub = dir.join(ds.domain_name()).join(split.as_str());
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            let mut rows = Vec::new();
            for (i, s) in ds.samples().iter().enumerate().filter(|(_, s)| s.split == split) {
                let class = &ds.class_names()[s.label];
                let file = format!("{class}_{i:05}.png");
                s.image.save_png(&sub.join(&file))?;
                rows.push(ManifestRow {
                    path: format!("{}/{}/{}", ds.domain_name(), split.as_str(), file),
                    label: class.clone(),
                    split,
                });
            }
            let m = dir.join(format!("{}_{}.csv", ds.domain_name(), split.as_str()));
            write_manifest(&m, &rows)?;
            manifests.push(m);
        }
    }
    Ok(manifests)
}
