use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::blur::{apply_blur, estimate_blur_strength, Blur};
use super::color::color_transfer;
use crate::error::{Error, Result};
use crate::imaging::{color_stats, rgb_to_lab, CalibrationProfile, ColorStats, ImageRgb, SharpnessStats};
use crate::seed::rng_for;

/// Probability used for every transform of a guided pipeline.
pub const DEFAULT_PROBABILITY: f64 = 0.5;

/// One appearance or orientation transform. `None` angles and turn counts
/// are drawn uniformly on each application.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformKind {
    ColorTransfer {
        target: ColorStats,
    },
    /// Moves the image's L* mean and std to values drawn uniformly from
    /// the given ranges. Chroma is left untouched.
    LightnessJitter {
        mean: [f64; 2],
        std: [f64; 2],
    },
    GaussianBlur {
        sigma: f64,
    },
    MotionBlur {
        length: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        angle_deg: Option<f64>,
    },
    DefocusBlur {
        radius: f64,
    },
    HorizontalFlip,
    VerticalFlip,
    Rotate90 {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        quarter_turns: Option<u8>,
    },
    /// Applies one option, chosen uniformly.
    OneOf {
        options: Vec<TransformKind>,
    },
}

impl TransformKind {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::contract(m));
        match self {
            TransformKind::ColorTransfer { target } => {
                if target.mean.iter().chain(&target.std).any(|v| !v.is_finite())
                    || target.std.iter().any(|&s| s < 0.0)
                {
                    return bad(format!("invalid color target {target:?}"));
                }
            }
            TransformKind::LightnessJitter { mean, std } => {
                let ok = |r: &[f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
                if !ok(mean) || !ok(std) || std[0] < 0.0 {
                    return bad(format!("invalid lightness ranges {mean:?}, {std:?}"));
                }
            }
            TransformKind::GaussianBlur { sigma } if !(*sigma >= 0.0) || !sigma.is_finite() => {
                return bad(format!("sigma {sigma} must be >= 0"));
            }
            TransformKind::MotionBlur { length, angle_deg } => {
                if *length < 1 || angle_deg.is_some_and(|a| !a.is_finite()) {
                    return bad(format!("motion blur length {length} must be >= 1"));
                }
            }
            TransformKind::DefocusBlur { radius } if !(*radius >= 0.0) || !radius.is_finite() => {
                return bad(format!("radius {radius} must be >= 0"));
            }
            TransformKind::Rotate90 {
                quarter_turns: Some(q),
            } if !(1..=3).contains(q) => {
                return bad(format!("quarter turns {q} not in 1..=3"));
            }
            TransformKind::OneOf { options } => {
                if options.is_empty() {
                    return bad("one_of needs at least one option".into());
                }
                for o in options {
                    o.validate()?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// True for every kind that keeps pixel geometry or only flips / turns
    /// by right angles.
    pub fn preserves_morphology(&self) -> bool {
        match self {
            TransformKind::OneOf { options } => options.iter().all(Self::preserves_morphology),
            _ => true,
        }
    }

    fn apply(&self, img: &ImageRgb, rng: &mut ChaCha8Rng) -> ImageRgb {
        match self {
            TransformKind::ColorTransfer { target } => color_transfer(img, target),
            TransformKind::LightnessJitter { mean, std } => {
                let mut draw = |r: &[f64; 2]| if r[0] < r[1] { rng.random_range(r[0]..=r[1]) } else { r[0] };
                let mut target = color_stats(&rgb_to_lab(img));
                target.mean[0] = draw(mean);
                target.std[0] = draw(std);
                color_transfer(img, &target)
            }
            TransformKind::GaussianBlur { sigma } => apply_blur(img, &Blur::Gaussian { sigma: *sigma }),
            TransformKind::MotionBlur { length, angle_deg } => {
                let angle_deg = angle_deg.unwrap_or_else(|| rng.random_range(0.0..180.0));
                apply_blur(
                    img,
                    &Blur::Motion {
                        length: *length,
                        angle_deg,
                    },
                )
            }
            TransformKind::DefocusBlur { radius } => apply_blur(img, &Blur::Defocus { radius: *radius }),
            TransformKind::HorizontalFlip => flip(img, true),
            TransformKind::VerticalFlip => flip(img, false),
            TransformKind::Rotate90 { quarter_turns } => {
                let q = quarter_turns.unwrap_or_else(|| rng.random_range(1..=3));
                rotate90(img, q)
            }
            TransformKind::OneOf { options } => {
                let i = rng.random_range(0..options.len());
                options[i].apply(img, rng)
            }
        }
    }
}

pub fn flip(img: &ImageRgb, horizontal: bool) -> ImageRgb {
    let (w, h) = (img.width(), img.height());
    ImageRgb::from_fn(w, h, |x, y| {
        if horizontal {
            img.pixel(w - 1 - x, y)
        } else {
            img.pixel(x, h - 1 - y)
        }
    })
    .expect("same dimensions")
}

/// Clockwise rotation by `quarter_turns` right angles.
pub fn rotate90(img: &ImageRgb, quarter_turns: u8) -> ImageRgb {
    let (w, h) = (img.width(), img.height());
    let q = quarter_turns % 4;
    let (ow, oh) = if q % 2 == 1 { (h, w) } else { (w, h) };
    ImageRgb::from_fn(ow, oh, |x, y| match q {
        0 => img.pixel(x, y),
        1 => img.pixel(y, h - 1 - x),
        2 => img.pixel(w - 1 - x, h - 1 - y),
        _ => img.pixel(w - 1 - y, x),
    })
    .expect("rotation keeps pixel count")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    #[serde(flatten)]
    pub kind: TransformKind,
    pub probability: f64,
}

impl TransformSpec {
    pub fn new(kind: TransformKind, probability: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&probability) {
            return Err(Error::contract(format!("probability {probability} not in [0, 1]")));
        }
        kind.validate()?;
        Ok(Self { kind, probability })
    }
}

/// Ordered stochastic transforms. The randomness for transform `k` of
/// sample `i` comes from its own stream keyed by `(master_seed, i, k)`, so
/// results never depend on the order in which samples are processed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformPipeline {
    pub master_seed: u64,
    pub transforms: Vec<TransformSpec>,
}

impl TransformPipeline {
    pub fn new(master_seed: u64, transforms: Vec<TransformSpec>) -> Result<Self> {
        for t in &transforms {
            TransformSpec::new(t.kind.clone(), t.probability)?;
        }
        Ok(Self {
            master_seed,
            transforms,
        })
    }

    pub fn apply(&self, img: &ImageRgb, sample_index: u64) -> ImageRgb {
        self.apply_traced(img, sample_index).0
    }

    /// Like [`apply`](Self::apply), also reporting which transforms fired.
    pub fn apply_traced(&self, img: &ImageRgb, sample_index: u64) -> (ImageRgb, Vec<bool>) {
        let mut out = img.clone();
        let mut fired = Vec::with_capacity(self.transforms.len());
        for (pos, spec) in self.transforms.iter().enumerate() {
            let mut rng = rng_for(self.master_seed, &[sample_index, pos as u64]);
            let hit = rng.random::<f64>() < spec.probability;
            if hit {
                out = spec.kind.apply(&out, &mut rng);
            }
            fired.push(hit);
        }
        (out, fired)
    }

    /// Copy with every probability replaced by `p`.
    pub fn with_probability(&self, p: f64) -> Result<Self> {
        let transforms = self
            .transforms
            .iter()
            .map(|t| TransformSpec::new(t.kind.clone(), p))
            .collect::<Result<_>>()?;
        Ok(Self {
            master_seed: self.master_seed,
            transforms,
        })
    }

    pub fn preserves_morphology(&self) -> bool {
        self.transforms.iter().all(|t| t.kind.preserves_morphology())
    }

    /// Color-transfer target of the first color transform, if any.
    pub fn color_target(&self) -> Option<&ColorStats> {
        self.transforms.iter().find_map(|t| match &t.kind {
            TransformKind::ColorTransfer { target } => Some(target),
            _ => None,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        Self::new(p.master_seed, p.transforms)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Blur family parameterized by one strength: gaussian sigma, motion
/// length `ceil(2 sigma) + 1` at a random angle, and defocus radius sigma.
pub fn blur_family(sigma: f64) -> TransformKind {
    TransformKind::OneOf {
        options: vec![
            TransformKind::GaussianBlur { sigma },
            TransformKind::MotionBlur {
                length: (2.0 * sigma).ceil() as usize + 1,
                angle_deg: None,
            },
            TransformKind::DefocusBlur { radius: sigma },
        ],
    }
}

fn orientation_specs(p: f64) -> Result<Vec<TransformSpec>> {
    Ok(vec![
        TransformSpec::new(TransformKind::HorizontalFlip, p)?,
        TransformSpec::new(TransformKind::VerticalFlip, p)?,
        TransformSpec::new(TransformKind::Rotate90 { quarter_turns: None }, p)?,
    ])
}

/// Guided pipeline: color transfer to the profile's aggregate color, one
/// blur from the family at the estimated strength, then flips and a
/// right-angle turn, each with probability 0.5.
pub fn build_pipeline(
    profile: &CalibrationProfile,
    source_sharpness: &SharpnessStats,
    master_seed: u64,
) -> Result<TransformPipeline> {
    let sigma = estimate_blur_strength(source_sharpness, &profile.aggregate_sharpness);
    let p = DEFAULT_PROBABILITY;
    let mut transforms = vec![
        TransformSpec::new(
            TransformKind::ColorTransfer {
                target: profile.aggregate_color,
            },
            p,
        )?,
        TransformSpec::new(blur_family(sigma), p)?,
    ];
    transforms.extend(orientation_specs(p)?);
    TransformPipeline::new(master_seed, transforms)
}

/// Appearance pipeline derived from a dataset's own profile: lightness
/// jitter inside the range of its per-image L* statistics, the blur family
/// at `blur_sigma`, flips and right-angle turns.
pub fn generic_pipeline(
    profile: &CalibrationProfile,
    blur_sigma: f64,
    master_seed: u64,
) -> Result<TransformPipeline> {
    if profile.per_image.is_empty() {
        return Err(Error::contract("profile has no per-image statistics"));
    }
    let range = |f: fn(&ColorStats) -> f64| {
        profile.per_image.iter().fold([f64::INFINITY, f64::NEG_INFINITY], |r, s| {
            let v = f(&s.color);
            [r[0].min(v), r[1].max(v)]
        })
    };
    let jitter = TransformKind::LightnessJitter {
        mean: range(|c| c.mean[0]),
        std: range(|c| c.std[0]),
    };
    let p = DEFAULT_PROBABILITY;
    let mut transforms = vec![
        TransformSpec::new(jitter, p)?,
        TransformSpec::new(blur_family(blur_sigma), p)?,
    ];
    transforms.extend(orientation_specs(p)?);
    TransformPipeline::new(master_seed, transforms)
}
