//! Uniform wavelength grids, trapezoid integration and the bundled CIE 1931
//! 2° color-matching functions.
//!
//! The CMF resource is a CSV with the header
//! `wavelength_nm,xbar,ybar,zbar`, one row per 5 nm step from 380 to 780 nm,
//! decimal-point floats.

use std::sync::OnceLock;

use crate::error::{Error, Result};

const CIE1931_CSV: &str = include_str!("../../data/cie1931_2deg_5nm.csv");

/// A strictly increasing wavelength grid with uniform step, in nanometres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WavelengthGrid {
    start_nm: f64,
    step_nm: f64,
    len: usize,
}

impl WavelengthGrid {
    pub fn new(start_nm: f64, step_nm: f64, len: usize) -> Result<Self> {
        if !(start_nm.is_finite() && step_nm.is_finite()) || step_nm <= 0.0 || len < 2 {
            return Err(Error::invalid(format!(
                "wavelength grid needs finite start, positive step and >= 2 samples \
                 (start={start_nm}, step={step_nm}, len={len})"
            )));
        }
        Ok(Self {
            start_nm,
            step_nm,
            len,
        })
    }

    /// The 380–780 nm visible range sampled every `step_nm`.
    pub fn visible(step_nm: f64) -> Result<Self> {
        let n = (400.0 / step_nm).round();
        if (n * step_nm - 400.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "step {step_nm} nm does not divide the 380-780 nm range"
            )));
        }
        Self::new(380.0, step_nm, n as usize + 1)
    }

    pub fn start_nm(&self) -> f64 {
        self.start_nm
    }

    pub fn step_nm(&self) -> f64 {
        self.step_nm
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn wavelength(&self, i: usize) -> f64 {
        self.start_nm + self.step_nm * i as f64
    }

    pub fn wavelengths(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len).map(move |i| self.wavelength(i))
    }

    /// Composite trapezoid rule over the whole grid.
    pub fn trapezoid(&self, f: impl Fn(usize) -> f64) -> f64 {
        let mut acc = 0.5 * (f(0) + f(self.len - 1));
        for i in 1..self.len - 1 {
            acc += f(i);
        }
        acc * self.step_nm
    }

    pub fn same_as(&self, other: &WavelengthGrid) -> bool {
        self.len == other.len
            && (self.start_nm - other.start_nm).abs() < 1e-9
            && (self.step_nm - other.step_nm).abs() < 1e-9
    }
}

/// Named curves sampled on a common grid.
#[derive(Debug, Clone)]
pub struct SpectralTable {
    grid: WavelengthGrid,
    names: Vec<String>,
    curves: Vec<Vec<f64>>,
}

impl SpectralTable {
    /// Parses a CSV whose first column is the wavelength in nm and whose
    /// remaining columns are non-negative curve samples.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| Error::invalid(format!("spectral csv header: {e}")))?
            .clone();
        if headers.len() < 2 {
            return Err(Error::invalid("spectral csv needs a wavelength and at least one curve"));
        }
        let names: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();
        let mut wavelengths = Vec::new();
        let mut curves = vec![Vec::new(); names.len()];
        for (row, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::invalid(format!("spectral csv row {row}: {e}")))?;
            let parse = |i: usize| -> Result<f64> {
                record
                    .get(i)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::invalid(format!("spectral csv row {row}, column {i}")))
            };
            wavelengths.push(parse(0)?);
            for (c, curve) in curves.iter_mut().enumerate() {
                let v = parse(c + 1)?;
                if !(v >= 0.0) {
                    return Err(Error::invalid(format!(
                        "spectral csv row {row}: negative or NaN sample {v}"
                    )));
                }
                curve.push(v);
            }
        }
        if wavelengths.len() < 2 {
            return Err(Error::invalid("spectral csv needs at least two rows"));
        }
        let step = wavelengths[1] - wavelengths[0];
        for (i, pair) in wavelengths.windows(2).enumerate() {
            if ((pair[1] - pair[0]) - step).abs() > 1e-9 || pair[1] <= pair[0] {
                return Err(Error::invalid(format!(
                    "spectral csv wavelengths not uniform and increasing at row {}",
                    i + 1
                )));
            }
        }
        let grid = WavelengthGrid::new(wavelengths[0], step, wavelengths.len())?;
        Ok(Self {
            grid,
            names,
            curves,
        })
    }

    pub fn grid(&self) -> &WavelengthGrid {
        &self.grid
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn curve(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.curves[i].as_slice())
    }

    pub fn curve_at(&self, index: usize) -> &[f64] {
        &self.curves[index]
    }
}

/// The CIE 1931 2° standard observer at 5 nm, 380–780 nm.
pub struct Cie1931 {
    table: SpectralTable,
}

impl Cie1931 {
    pub fn grid(&self) -> &WavelengthGrid {
        self.table.grid()
    }

    pub fn xbar(&self) -> &[f64] {
        self.table.curve_at(0)
    }

    pub fn ybar(&self) -> &[f64] {
        self.table.curve_at(1)
    }

    pub fn zbar(&self) -> &[f64] {
        self.table.curve_at(2)
    }

    pub fn table(&self) -> &SpectralTable {
        &self.table
    }

    /// Tristimulus values of a spectral power distribution sampled on this grid.
    pub fn tristimulus(&self, spd: &[f64]) -> [f64; 3] {
        debug_assert_eq!(spd.len(), self.grid().len());
        let g = self.grid();
        [
            g.trapezoid(|i| spd[i] * self.xbar()[i]),
            g.trapezoid(|i| spd[i] * self.ybar()[i]),
            g.trapezoid(|i| spd[i] * self.zbar()[i]),
        ]
    }
}

pub fn cie1931() -> &'static Cie1931 {
    static CMF: OnceLock<Cie1931> = OnceLock::new();
    CMF.get_or_init(|| {
        let table = SpectralTable::from_csv(CIE1931_CSV).expect("bundled CMF table is valid");
        assert_eq!(table.names(), ["xbar", "ybar", "zbar"]);
        Cie1931 { table }
    })
}

/// The bundled CMF CSV text, for callers that want to export it.
pub fn cie1931_csv() -> &'static str {
    CIE1931_CSV
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_cmf_shape() {
        let cmf = cie1931();
        let g = cmf.grid();
        assert_eq!(g.len(), 81);
        assert_eq!(g.start_nm(), 380.0);
        assert_eq!(g.step_nm(), 5.0);
        assert_eq!(g.wavelength(80), 780.0);
        // ybar peaks at 555 nm with value 1
        let peak = cmf
            .ybar()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        assert_eq!(g.wavelength(peak.0), 555.0);
        assert_eq!(*peak.1, 1.0);
    }

    #[test]
    fn trapezoid_is_exact_for_linear_functions() {
        let g = WavelengthGrid::new(0.0, 0.5, 21).unwrap();
        let v = g.trapezoid(|i| 2.0 * g.wavelength(i) + 1.0);
        // integral of 2x+1 over [0,10]
        assert!((v - 110.0).abs() < 1e-12);
    }

    #[test]
    fn equal_energy_white_is_near_one_third() {
        let cmf = cie1931();
        let xyz = cmf.tristimulus(&vec![1.0; cmf.grid().len()]);
        let s: f64 = xyz.iter().sum();
        assert!((xyz[0] / s - 1.0 / 3.0).abs() < 1e-3);
        assert!((xyz[1] / s - 1.0 / 3.0).abs() < 1e-3);
    }

    #[test]
    fn rejects_nonuniform_grid() {
        let csv = "wavelength_nm,a\n380,1\n385,1\n395,1\n";
        assert!(SpectralTable::from_csv(csv).is_err());
        let csv = "wavelength_nm,a\n380,1\n385,-1\n";
        assert!(SpectralTable::from_csv(csv).is_err());
    }

    #[test]
    fn visible_grid_steps() {
        assert_eq!(WavelengthGrid::visible(1.0).unwrap().len(), 401);
        assert_eq!(WavelengthGrid::visible(5.0).unwrap().len(), 81);
        assert!(WavelengthGrid::visible(7.0).is_err());
    }
}
