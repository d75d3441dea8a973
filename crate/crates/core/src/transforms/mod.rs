//! Calibration-guided appearance transforms and the seeded stochastic
//! pipeline that composes them.

mod blur;
mod color;
mod pipeline;

pub use blur::{
    apply_blur, convolve, convolve_separable, disk_kernel, estimate_blur_strength, gaussian_blur,
    gaussian_kernel_1d, motion_kernel, reference_texture, Blur, Kernel2d, MAX_BLUR_SIGMA,
};
pub use color::{color_transfer, color_transfer_lab, color_transfer_unclipped, transfer_channel, DEGENERATE_STD};
pub use pipeline::{
    blur_family, build_pipeline, flip, generic_pipeline, rotate90, TransformKind, TransformPipeline,
    TransformSpec, DEFAULT_PROBABILITY,
};
