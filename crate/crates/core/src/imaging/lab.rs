//! sRGB (D65) to CIE L*a*b* conversion.

use super::image::ImageRgb;
use crate::error::{Error, Result};

/// Linear sRGB to XYZ, IEC 61966-2-1.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124, 0.3576, 0.1805],
    [0.2126, 0.7152, 0.0722],
    [0.0193, 0.1192, 0.9505],
];

/// D65 reference white as the image of linear (1, 1, 1), so white maps
/// to a = b = 0 exactly.
fn white() -> [f64; 3] {
    let m = &RGB_TO_XYZ;
    [
        m[0][0] + m[0][1] + m[0][2],
        m[1][0] + m[1][1] + m[1][2],
        m[2][0] + m[2][1] + m[2][2],
    ]
}

fn xyz_to_rgb() -> [[f64; 3]; 3] {
    let m = &RGB_TO_XYZ;
    let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let det = m[0][0] * cof(1, 2, 1, 2) - m[0][1] * cof(1, 2, 0, 2) + m[0][2] * cof(1, 2, 0, 1);
    [
        [cof(1, 2, 1, 2) / det, -cof(0, 2, 1, 2) / det, cof(0, 1, 1, 2) / det],
        [-cof(1, 2, 0, 2) / det, cof(0, 2, 0, 2) / det, -cof(0, 1, 0, 2) / det],
        [cof(1, 2, 0, 1) / det, -cof(0, 2, 0, 1) / det, cof(0, 1, 0, 1) / det],
    ]
}

fn to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn from_linear(c: f64) -> f64 {
    if c <= 0.0031308 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

const EPS: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

fn f(t: f64) -> f64 {
    if t > EPS {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

fn f_inv(t: f64) -> f64 {
    let t3 = t * t * t;
    if t3 > EPS {
        t3
    } else {
        (116.0 * t - 16.0) / KAPPA
    }
}

/// One sRGB pixel to L*a*b*.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(to_linear);
    let m = &RGB_TO_XYZ;
    let w = white();
    let xyz: [f64; 3] = std::array::from_fn(|i| m[i][0] * lin[0] + m[i][1] * lin[1] + m[i][2] * lin[2]);
    let fx = f(xyz[0] / w[0]);
    let fy = f(xyz[1] / w[1]);
    let fz = f(xyz[2] / w[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// One L*a*b* pixel to sRGB, without clipping out-of-gamut results.
pub fn lab_to_srgb_unclipped(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let w = white();
    let xyz = [f_inv(fx) * w[0], f_inv(fy) * w[1], f_inv(fz) * w[2]];
    let inv = xyz_to_rgb();
    std::array::from_fn(|i| {
        let lin = inv[i][0] * xyz[0] + inv[i][1] * xyz[1] + inv[i][2] * xyz[2];
        if lin < 0.0 {
            -from_linear(-lin)
        } else {
            from_linear(lin)
        }
    })
}

/// Image in L*a*b*, interleaved like [`ImageRgb`]. L in `[0, 100]`,
/// a and b in `[-128, 127]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

const RANGE_SLACK: f64 = 1e-9;

impl LabImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "lab image {width}x{height} with {} values",
                data.len()
            )));
        }
        for p in data.chunks_exact(3) {
            let ok = (-RANGE_SLACK..=100.0 + RANGE_SLACK).contains(&p[0])
                && (-128.0..=127.0).contains(&p[1])
                && (-128.0..=127.0).contains(&p[2]);
            if !ok {
                return Err(Error::contract(format!("lab value {p:?} out of range")));
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + Clone + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }
}

pub fn rgb_to_lab(img: &ImageRgb) -> LabImage {
    let data = img.pixels().flat_map(srgb_to_lab).collect();
    LabImage::new(img.width(), img.height(), data).expect("sRGB gamut lies inside the Lab ranges")
}

/// Inverse of [`rgb_to_lab`], clipping to `[0, 1]`.
pub fn lab_to_rgb(lab: &LabImage) -> ImageRgb {
    let data = lab.pixels().flat_map(lab_to_srgb_unclipped).collect();
    ImageRgb::from_clipped(lab.width(), lab.height(), data).expect("dimensions preserved")
}
