//! Clinical-artifact degradations at three fixed severities, plus a
//! severity-0 identity probe.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImageRgb;
use crate::seed::{rng_for, stream};
use crate::transforms::{apply_blur, gaussian_blur, Blur};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    Blur,
    SensorNoise,
    IlluminationShift,
    MotionBlur,
    Overexposure,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 5] = [
        DegradationKind::Blur,
        DegradationKind::SensorNoise,
        DegradationKind::IlluminationShift,
        DegradationKind::MotionBlur,
        DegradationKind::Overexposure,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DegradationKind::Blur => "blur",
            DegradationKind::SensorNoise => "sensor_noise",
            DegradationKind::IlluminationShift => "illumination_shift",
            DegradationKind::MotionBlur => "motion_blur",
            DegradationKind::Overexposure => "overexposure",
        }
    }

    fn id(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::contract(format!("unknown degradation {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    /// 1..=3; 0 leaves the image unchanged.
    pub severity: u8,
}

impl DegradationSpec {
    pub fn new(kind: DegradationKind, severity: u8) -> Result<Self> {
        if severity > 3 {
            return Err(Error::contract(format!("severity {severity} not in 0..=3")));
        }
        Ok(Self { kind, severity })
    }

    pub fn label(&self) -> String {
        format!("{}@{}", self.kind, self.severity)
    }
}

/// Every kind at severities 1, 2 and 3.
pub fn default_suite() -> Vec<DegradationSpec> {
    DegradationKind::ALL
        .into_iter()
        .flat_map(|kind| (1..=3).map(move |severity| DegradationSpec { kind, severity }))
        .collect()
}

fn level(severity: u8, values: [f64; 3]) -> f64 {
    values[usize::from(severity) - 1]
}

fn map_pixels(img: &ImageRgb, mut f: impl FnMut(f64) -> f64) -> ImageRgb {
    let data = img.data().iter().map(|&v| f(v)).collect();
    ImageRgb::from_clipped(img.width(), img.height(), data).expect("same dimensions")
}

/// Applies `spec` to `img`. All randomness (noise, gamma direction,
/// motion angle) comes from `seed`.
pub fn apply_degradation(img: &ImageRgb, spec: DegradationSpec, seed: u64) -> ImageRgb {
    if spec.severity == 0 {
        return img.clone();
    }
    let mut rng = rng_for(seed, &[stream::DEGRADE, spec.kind.id(), u64::from(spec.severity)]);
    let s = spec.severity.min(3);
    match spec.kind {
        DegradationKind::Blur => gaussian_blur(img, level(s, [0.5, 1.0, 2.0])),
        DegradationKind::SensorNoise => {
            let noise = Normal::new(0.0, level(s, [0.02, 0.05, 0.1])).expect("positive std");
            map_pixels(img, |v| v + noise.sample(&mut rng))
        }
        DegradationKind::IlluminationShift => {
            let g = level(s, [0.7, 0.5, 0.4]);
            let gamma = if rng.random::<bool>() { g } else { 1.0 / g };
            map_pixels(img, |v| v.powf(gamma))
        }
        DegradationKind::MotionBlur => {
            let length = [3, 5, 9][usize::from(s) - 1];
            let angle_deg = rng.random_range(0.0..180.0);
            apply_blur(img, &Blur::Motion { length, angle_deg })
        }
        DegradationKind::Overexposure => {
            let k = level(s, [1.3, 1.6, 2.0]);
            map_pixels(img, |v| v * k)
        }
    }
}
