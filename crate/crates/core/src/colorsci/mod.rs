//! Colorimetry primitives: illuminant vectors, chromaticity, correlated color
//! temperature, angular error and diagonal white balance.

mod cct;
pub mod spectral;

pub use cct::{
    cct_from_xy, cct_from_xy_with, cct_oracle, cct_oracle_with, locus_distance, planck_radiance,
    planckian_chromaticity, xy_to_uv, DEFAULT_LOCUS_THRESHOLD,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;

/// Lowest temperature the CCT routines accept or return, in Kelvin.
pub const KELVIN_MIN: f64 = 1667.0;
/// Highest temperature the CCT routines accept or return, in Kelvin.
pub const KELVIN_MAX: f64 = 25000.0;

/// Linear-RGB sRGB (D65) to CIE XYZ.
pub const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

/// A global illuminant color (or an estimate of one). Only the direction
/// carries meaning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IlluminantRgb {
    r: f64,
    g: f64,
    b: f64,
}

impl IlluminantRgb {
    pub fn new(r: f64, g: f64, b: f64) -> Result<Self> {
        for (name, v) in [("r", r), ("g", g), ("b", b)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!(
                    "illuminant component {name} = {v} must be finite and >= 0"
                )));
            }
        }
        if r == 0.0 && g == 0.0 && b == 0.0 {
            return Err(Error::invalid("illuminant vector is zero"));
        }
        Ok(Self { r, g, b })
    }

    pub fn from_array(v: [f64; 3]) -> Result<Self> {
        Self::new(v[0], v[1], v[2])
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn g(&self) -> f64 {
        self.g
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.r, self.g, self.b]
    }

    pub fn norm(&self) -> f64 {
        (self.r * self.r + self.g * self.g + self.b * self.b).sqrt()
    }

    pub fn normalized(&self) -> [f64; 3] {
        let n = self.norm();
        [self.r / n, self.g / n, self.b / n]
    }
}

/// CIE 1931 (x, y) chromaticity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chromaticity {
    x: f64,
    y: f64,
}

impl Chromaticity {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        if !(x > 0.0 && x < 1.0 && y > 0.0 && y < 1.0 && x + y < 1.0) {
            return Err(Error::invalid(format!(
                "chromaticity ({x}, {y}) outside 0 < x, y and x + y < 1"
            )));
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn distance(&self, other: &Chromaticity) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// A color temperature within the supported [1667, 25000] K envelope.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Kelvin(f64);

impl Kelvin {
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() || !(KELVIN_MIN..=KELVIN_MAX).contains(&value) {
            return Err(Error::OutOfRange {
                what: "color temperature",
                value,
                lo: KELVIN_MIN,
                hi: KELVIN_MAX,
            });
        }
        Ok(Self(value))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

impl std::fmt::Display for Kelvin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.1} K", self.0)
    }
}

/// Angle between two illuminant vectors, in degrees.
pub fn angular_error(a: &IlluminantRgb, b: &IlluminantRgb) -> f64 {
    angular_error_raw(&a.to_array(), &b.to_array()).expect("IlluminantRgb is never zero")
}

/// Angle between two arbitrary 3-vectors, in degrees. Fails on zero norm.
pub fn angular_error_raw(a: &[f64; 3], b: &[f64; 3]) -> Result<f64> {
    let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
    if !(na > 0.0 && nb > 0.0) || !na.is_finite() || !nb.is_finite() {
        return Err(Error::invalid("angular error of a zero or non-finite vector"));
    }
    let dot = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (na * nb);
    Ok(dot.clamp(-1.0, 1.0).acos().to_degrees())
}

/// Linear RGB to CIE XYZ through [`SRGB_TO_XYZ`].
pub fn rgb_to_xyz(rgb: [f64; 3]) -> [f64; 3] {
    let m = &SRGB_TO_XYZ;
    [
        m[0][0] * rgb[0] + m[0][1] * rgb[1] + m[0][2] * rgb[2],
        m[1][0] * rgb[0] + m[1][1] * rgb[1] + m[1][2] * rgb[2],
        m[2][0] * rgb[0] + m[2][1] * rgb[1] + m[2][2] * rgb[2],
    ]
}

pub fn xyz_to_xy(xyz: [f64; 3]) -> Result<Chromaticity> {
    let s = xyz[0] + xyz[1] + xyz[2];
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::invalid(format!("X+Y+Z = {s} is not positive")));
    }
    Chromaticity::new(xyz[0] / s, xyz[1] / s)
}

pub fn rgb_to_xy(rgb: &IlluminantRgb) -> Result<Chromaticity> {
    xyz_to_xy(rgb_to_xyz(rgb.to_array()))
}

/// Green-normalized von Kries correction: channel k is divided by
/// `illum_k / illum_g`.
pub fn apply_white_balance(image: &RgbImage, illum: &IlluminantRgb) -> Result<RgbImage> {
    let [r, g, b] = illum.to_array();
    if r <= 0.0 || g <= 0.0 || b <= 0.0 {
        return Err(Error::invalid(format!(
            "white balance needs strictly positive illuminant channels, got ({r}, {g}, {b})"
        )));
    }
    let gains = [(g / r) as f32, 1.0f32, (g / b) as f32];
    let mut out = image.clone();
    for px in out.pixels_mut() {
        for k in 0..3 {
            px[k] *= gains[k];
        }
    }
    Ok(out)
}
