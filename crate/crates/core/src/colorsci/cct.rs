//! Planckian locus and correlated color temperature.
//!
//! `cct_from_xy` is the Hernández-Andrés exponential-sum fit. `cct_oracle` is
//! an independent brute-force search over a 1 K tabulation of the locus,
//! nearest point measured in CIE 1960 (u, v).

use std::sync::OnceLock;

use super::spectral::{cie1931, WavelengthGrid};
use super::{Chromaticity, Kelvin, KELVIN_MAX, KELVIN_MIN};
use crate::error::{Error, Result};

/// Second radiation constant, m·K.
const C2: f64 = 1.438_776_877e-2;

/// Default limit on the (x, y) distance between a chromaticity and the locus.
pub const DEFAULT_LOCUS_THRESHOLD: f64 = 0.05;

/// Exponential-sum fit constants: epicenter (x_e, y_e), A0 and (A_i, t_i).
struct ExpSumFit {
    xe: f64,
    ye: f64,
    a0: f64,
    terms: &'static [(f64, f64)],
}

const FIT_LOW: ExpSumFit = ExpSumFit {
    xe: 0.3366,
    ye: 0.1735,
    a0: -949.863_15,
    terms: &[
        (6253.803_38, 0.921_59),
        (28.705_99, 0.200_39),
        (0.000_04, 0.071_25),
    ],
};

const FIT_HIGH: ExpSumFit = ExpSumFit {
    xe: 0.3356,
    ye: 0.1691,
    a0: 36284.489_53,
    terms: &[(0.002_28, 0.078_61), (5.4535e-36, 0.015_43)],
};

/// Above this the high-temperature constant set is used.
const FIT_SWITCH_K: f64 = 50_000.0;

impl ExpSumFit {
    fn eval(&self, c: &Chromaticity) -> f64 {
        let n = (c.x() - self.xe) / (c.y() - self.ye);
        self.a0 + self.terms.iter().map(|(a, t)| a * (-n / t).exp()).sum::<f64>()
    }
}

/// Spectral radiant exitance of a blackbody, up to a constant factor.
/// `wavelength_nm` in nanometres.
pub fn planck_radiance(wavelength_nm: f64, kelvin: f64) -> f64 {
    let lambda = wavelength_nm * 1e-9;
    // c1 is dropped; only relative spectra are ever used
    1.0 / (lambda.powi(5) * ((C2 / (lambda * kelvin)).exp_m1())) * 1e-30
}

fn planckian_xy_unchecked(kelvin: f64) -> (f64, f64) {
    let cmf = cie1931();
    let grid: &WavelengthGrid = cmf.grid();
    let spd: Vec<f64> = grid.wavelengths().map(|w| planck_radiance(w, kelvin)).collect();
    let [x, y, z] = cmf.tristimulus(&spd);
    let s = x + y + z;
    (x / s, y / s)
}

/// Chromaticity of a blackbody at `t`, integrated against the CIE 1931
/// CMFs on their 5 nm grid.
pub fn planckian_chromaticity(t: Kelvin) -> Chromaticity {
    let (x, y) = planckian_xy_unchecked(t.value());
    Chromaticity::new(x, y).expect("blackbody chromaticity lies inside the spectrum locus")
}

pub fn xy_to_uv(c: &Chromaticity) -> (f64, f64) {
    let d = -2.0 * c.x() + 12.0 * c.y() + 3.0;
    (4.0 * c.x() / d, 6.0 * c.y() / d)
}

struct LocusTable {
    /// (x, y, u, v) at KELVIN_MIN + i kelvin.
    points: Vec<[f64; 4]>,
}

fn locus_table() -> &'static LocusTable {
    static TABLE: OnceLock<LocusTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let n = (KELVIN_MAX - KELVIN_MIN) as usize + 1;
        let points = (0..n)
            .map(|i| {
                let (x, y) = planckian_xy_unchecked(KELVIN_MIN + i as f64);
                let d = -2.0 * x + 12.0 * y + 3.0;
                [x, y, 4.0 * x / d, 6.0 * y / d]
            })
            .collect();
        LocusTable { points }
    })
}

/// Smallest (x, y) distance from `c` to the tabulated Planckian locus.
pub fn locus_distance(c: &Chromaticity) -> f64 {
    locus_table()
        .points
        .iter()
        .map(|p| (p[0] - c.x()).hypot(p[1] - c.y()))
        .fold(f64::INFINITY, f64::min)
}

fn check_locus(c: &Chromaticity, limit: f64) -> Result<()> {
    let distance = locus_distance(c);
    if distance > limit {
        return Err(Error::OffLocus {
            x: c.x(),
            y: c.y(),
            distance,
            limit,
        });
    }
    Ok(())
}

pub fn cct_from_xy(c: &Chromaticity) -> Result<Kelvin> {
    cct_from_xy_with(c, DEFAULT_LOCUS_THRESHOLD)
}

/// Exponential-sum CCT with the two-range constant switch, clamped to the
/// supported envelope. Rejects chromaticities farther than `max_locus_distance`
/// from the locus, and the fit's singular line y = y_e.
pub fn cct_from_xy_with(c: &Chromaticity, max_locus_distance: f64) -> Result<Kelvin> {
    if (c.y() - FIT_LOW.ye).abs() < 1e-12 || (c.y() - FIT_HIGH.ye).abs() < 1e-12 {
        return Err(Error::invalid(format!(
            "chromaticity y = {} sits on the CCT fit epicenter",
            c.y()
        )));
    }
    check_locus(c, max_locus_distance)?;
    let mut t = FIT_LOW.eval(c);
    if t > FIT_SWITCH_K {
        t = FIT_HIGH.eval(c);
    }
    if !t.is_finite() {
        return Err(Error::invalid(format!(
            "CCT fit is not finite at ({}, {})",
            c.x(),
            c.y()
        )));
    }
    Kelvin::new(t.clamp(KELVIN_MIN, KELVIN_MAX))
}

pub fn cct_oracle(c: &Chromaticity) -> Result<Kelvin> {
    cct_oracle_with(c, DEFAULT_LOCUS_THRESHOLD)
}

/// Brute-force CCT: the 1 K grid temperature whose locus point is nearest
/// to `c` in CIE 1960 (u, v).
pub fn cct_oracle_with(c: &Chromaticity, max_locus_distance: f64) -> Result<Kelvin> {
    check_locus(c, max_locus_distance)?;
    let (u, v) = xy_to_uv(c);
    let (best, _) = locus_table()
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| (i, (p[2] - u).powi(2) + (p[3] - v).powi(2)))
        .fold((0usize, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
    Kelvin::new(KELVIN_MIN + best as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k(t: f64) -> Kelvin {
        Kelvin::new(t).unwrap()
    }

    #[test]
    fn locus_x_decreases_with_temperature() {
        let mut prev = planckian_chromaticity(k(2000.0)).x();
        for t in (2100..=10000).step_by(100) {
            let x = planckian_chromaticity(k(t as f64)).x();
            assert!(x < prev, "x not decreasing at {t} K");
            prev = x;
        }
    }

    #[test]
    fn locus_matches_published_illuminants() {
        let a = planckian_chromaticity(k(2856.0));
        let dist_a = a.distance(&Chromaticity::new(0.4476, 0.4074).unwrap());
        assert!(dist_a < 0.005, "illuminant A distance {dist_a}");
        let d = planckian_chromaticity(k(6500.0));
        let dist_d65 = d.distance(&Chromaticity::new(0.3127, 0.3290).unwrap());
        assert!(dist_d65 < 0.01, "D65 distance {dist_d65}");
    }

    #[test]
    fn fit_on_d65() {
        // Reference value of the fit at D65 (independent numpy evaluation).
        let d65 = Chromaticity::new(0.3127, 0.3290).unwrap();
        let t = cct_from_xy(&d65).unwrap().value();
        assert!((t - 6500.742_043_18).abs() < 1e-4, "{t}");
        let oracle = cct_oracle(&d65).unwrap().value();
        assert!((t - oracle).abs() <= 150.0, "fit {t} vs oracle {oracle}");
    }

    #[test]
    fn oracle_regression_on_d65() {
        let d65 = Chromaticity::new(0.3127, 0.3290).unwrap();
        // independent numpy search over the same 5 nm table gives 6506 K
        assert_eq!(cct_oracle(&d65).unwrap().value(), 6506.0);
    }

    #[test]
    fn fit_round_trip_at_5000() {
        let c = planckian_chromaticity(k(5000.0));
        let t = cct_from_xy(&c).unwrap().value();
        assert!((t - 5000.0).abs() <= 50.0, "{t}");
    }

    #[test]
    fn oracle_recovers_its_generator() {
        let c = planckian_chromaticity(k(4000.0));
        let t = cct_oracle(&c).unwrap().value();
        assert!((t - 4000.0).abs() <= 1.0);
        for t in (1700..=25000).step_by(100) {
            let c = planckian_chromaticity(k(t as f64));
            let got = cct_oracle(&c).unwrap().value();
            assert!((got - t as f64).abs() <= 1.0, "{t} -> {got}");
        }
    }

    #[test]
    fn off_locus_rejection() {
        let far = Chromaticity::new(0.9, 0.05).unwrap();
        assert!(matches!(cct_from_xy(&far), Err(Error::OffLocus { .. })));
        let base = planckian_chromaticity(k(5000.0));
        // roughly perpendicular to the locus, 0.1 away
        let off = Chromaticity::new(base.x() - 0.06, base.y() + 0.08).unwrap();
        assert!(cct_oracle(&off).is_err());
        assert!(cct_oracle_with(&off, 0.2).is_ok());
    }

    #[test]
    fn epicenter_line_rejected() {
        let c = Chromaticity::new(0.3, 0.1735).unwrap();
        assert!(cct_from_xy_with(&c, 1.0).is_err());
    }

    #[test]
    fn fit_agrees_with_oracle_on_locus() {
        for t in (3000..=15000).step_by(250) {
            let c = planckian_chromaticity(k(t as f64));
            let fit = cct_from_xy(&c).unwrap().value();
            let oracle = cct_oracle(&c).unwrap().value();
            assert!((fit - oracle).abs() <= 100.0, "{t}: fit {fit} oracle {oracle}");
        }
    }
}
