//! Images, L*a*b* conversion, and the appearance statistics that make up a
//! calibration profile.

mod image;
mod lab;
mod stats;

pub use image::ImageRgb;
pub use lab::{lab_to_rgb, lab_to_srgb_unclipped, rgb_to_lab, srgb_to_lab, LabImage};
pub use stats::{
    build_calibration_profile, color_stats, image_stats, mean_sharpness, sharpness_stats, CalibrationProfile,
    ColorStats, ImageStats, SharpnessStats, MIN_SHARPNESS_SIDE,
};
