use crate::imaging::{lab_to_srgb_unclipped, srgb_to_lab, ColorStats, ImageRgb};
use crate::imaging::{color_stats, rgb_to_lab};

/// Below this source std a channel is shifted instead of rescaled.
pub const DEGENERATE_STD: f64 = 1e-6;

/// Per-channel affine map taking `(src_mean, src_std)` to
/// `(tgt_mean, tgt_std)`; a flat source channel is only shifted.
pub fn transfer_channel(v: f64, src_mean: f64, src_std: f64, tgt_mean: f64, tgt_std: f64) -> f64 {
    if src_std < DEGENERATE_STD {
        v - src_mean + tgt_mean
    } else {
        (v - src_mean) / src_std * tgt_std + tgt_mean
    }
}

/// Global statistic matching in L*a*b*: each channel is standardized with
/// the image's own mean/std and rescaled to the target's. Returns the
/// transferred L*a*b* values, interleaved.
pub fn color_transfer_lab(img: &ImageRgb, target: &ColorStats) -> Vec<f64> {
    let src = color_stats(&rgb_to_lab(img));
    img.pixels()
        .flat_map(|p| {
            let lab = srgb_to_lab(p);
            std::array::from_fn::<f64, 3, _>(|c| {
                transfer_channel(lab[c], src.mean[c], src.std[c], target.mean[c], target.std[c])
            })
        })
        .collect()
}

/// [`color_transfer_lab`] converted back to sRGB without clipping.
pub fn color_transfer_unclipped(img: &ImageRgb, target: &ColorStats) -> Vec<f64> {
    color_transfer_lab(img, target)
        .chunks_exact(3)
        .flat_map(|p| lab_to_srgb_unclipped([p[0], p[1], p[2]]))
        .collect()
}

pub fn color_transfer(img: &ImageRgb, target: &ColorStats) -> ImageRgb {
    ImageRgb::from_clipped(img.width(), img.height(), color_transfer_unclipped(img, target))
        .expect("dimensions preserved")
}
