//! Synthetic multi-camera data: Gaussian-bump camera spectral sensitivities,
//! blackbody illuminants, patchwork reflectance scenes, and a dataset writer.
//!
//! Pixel values follow the tri-chromatic sensor model
//! `rho_k(X) = ∫ E(λ) S(λ, X) R_k(λ) dλ` and the ground truth illuminant is
//! the same integral with `S ≡ 1`. All integrals use the trapezoid rule on
//! the shared wavelength grid.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::colorsci::spectral::{cie1931, WavelengthGrid};
use crate::colorsci::{planck_radiance, IlluminantRgb, Kelvin};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::seed::derive_seed;

/// Canonical (peak nm, width nm, amplitude) for the B, G and R channels.
/// Amplitudes are fitted so that blackbody light seen by this sensor and read
/// as linear sRGB lands within 1% of its temperature over 2500–9000 K.
const CANONICAL_BUMPS: [Bump; 3] = [
    Bump {
        peak_nm: 450.0,
        width_nm: 20.0,
        amplitude: 0.875,
    },
    Bump {
        peak_nm: 545.0,
        width_nm: 35.0,
        amplitude: 0.45,
    },
    Bump {
        peak_nm: 620.0,
        width_nm: 24.0,
        amplitude: 0.945,
    },
];

/// Largest accepted CSS jitter scale.
pub const MAX_CSS_JITTER: f64 = 0.3;

/// Peak shift, in nm, at jitter 1.0.
const PEAK_SHIFT_NM: f64 = 30.0;

const SPD_MIN_K: f64 = 2000.0;
const SPD_MAX_K: f64 = 12000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub peak_nm: f64,
    pub width_nm: f64,
    pub amplitude: f64,
}

impl Bump {
    fn eval(&self, wavelength_nm: f64) -> f64 {
        let z = (wavelength_nm - self.peak_nm) / self.width_nm;
        self.amplitude * (-0.5 * z * z).exp()
    }
}

/// Per-channel spectral sensitivities `R_k(λ)`, stored as R, G, B curves.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraCss {
    camera_id: String,
    grid: WavelengthGrid,
    /// Bumps in R, G, B order.
    bumps: [Bump; 3],
    curves: [Vec<f64>; 3],
}

impl CameraCss {
    /// Samples the analytic bumps on `grid`.
    pub fn from_bumps(camera_id: impl Into<String>, bumps: [Bump; 3], grid: WavelengthGrid) -> Result<Self> {
        let camera_id = camera_id.into();
        if !(bumps[2].peak_nm < bumps[1].peak_nm && bumps[1].peak_nm < bumps[0].peak_nm) {
            return Err(Error::invalid("CSS peaks must satisfy B < G < R"));
        }
        for b in &bumps {
            if !(b.width_nm > 0.0 && b.amplitude > 0.0) {
                return Err(Error::invalid("CSS bumps need positive width and amplitude"));
            }
        }
        let curves = bumps.map(|b| grid.wavelengths().map(|w| b.eval(w)).collect::<Vec<_>>());
        if curves.iter().any(|c| !c.iter().any(|&v| v > 0.0)) {
            return Err(Error::invalid("every CSS channel needs a positive sample on the grid"));
        }
        Ok(Self {
            camera_id,
            grid,
            bumps,
            curves,
        })
    }

    /// The same sensor resampled on a different grid.
    pub fn resampled(&self, grid: WavelengthGrid) -> Result<Self> {
        Self::from_bumps(self.camera_id.clone(), self.bumps, grid)
    }

    pub fn camera_id(&self) -> &str {
        &self.camera_id
    }

    pub fn grid(&self) -> &WavelengthGrid {
        &self.grid
    }

    /// Channel 0 = R, 1 = G, 2 = B.
    pub fn curve(&self, channel: usize) -> &[f64] {
        &self.curves[channel]
    }

    pub fn bumps(&self) -> &[Bump; 3] {
        &self.bumps
    }

    /// Peak wavelength of each channel (R, G, B).
    pub fn peaks(&self) -> [f64; 3] {
        self.bumps.map(|b| b.peak_nm)
    }

    #[cfg(test)]
    pub(crate) fn curves_mut(&mut self) -> &mut [Vec<f64>; 3] {
        &mut self.curves
    }
}

/// Three Gaussian bumps near 620/545/450 nm with per-camera jitter of peak,
/// width and amplitude. `jitter = 0` gives the canonical sensor.
pub fn make_css(seed: u64, jitter: f64) -> Result<CameraCss> {
    make_css_named(format!("css{seed}"), seed, jitter)
}

pub fn make_css_named(camera_id: impl Into<String>, seed: u64, jitter: f64) -> Result<CameraCss> {
    if !(0.0..=MAX_CSS_JITTER).contains(&jitter) {
        return Err(Error::OutOfRange {
            what: "CSS jitter",
            value: jitter,
            lo: 0.0,
            hi: MAX_CSS_JITTER,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bumps = [CANONICAL_BUMPS[2], CANONICAL_BUMPS[1], CANONICAL_BUMPS[0]];
    for b in bumps.iter_mut() {
        let (dp, dw, da): (f64, f64, f64) = (
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
        );
        b.peak_nm += jitter * PEAK_SHIFT_NM * dp;
        b.width_nm *= 1.0 + jitter * dw;
        b.amplitude *= 1.0 + jitter * da;
    }
    CameraCss::from_bumps(camera_id, bumps, *cie1931().grid())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpdFamily {
    Planckian,
    PlanckianJittered,
}

/// An illuminant spectrum normalized so that `∫ E ȳ dλ = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct IlluminantSpd {
    grid: WavelengthGrid,
    values: Vec<f64>,
    nominal_cct: Kelvin,
    family: SpdFamily,
}

impl IlluminantSpd {
    pub fn grid(&self) -> &WavelengthGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn nominal_cct(&self) -> Kelvin {
        self.nominal_cct
    }

    pub fn family(&self) -> SpdFamily {
        self.family
    }

    /// The same spectrum multiplied by `s`. Breaks the ȳ normalization.
    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out
    }
}

fn spd_jitter_profile(seed: u64) -> impl Fn(f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // two slow sinusoids over the visible range; |profile - 1| <= 0.16
    let terms: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.gen_range(-0.08..=0.08),
                rng.gen_range(0.5..=2.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    move |w: f64| {
        let t = (w - 380.0) / 400.0;
        1.0 + terms
            .iter()
            .map(|(a, f, p)| a * (std::f64::consts::TAU * f * t + p).sin())
            .sum::<f64>()
    }
}

/// Blackbody spectrum at `t` on the CMF grid, optionally with a smooth
/// multiplicative perturbation that moves it slightly off the locus.
pub fn planckian_spd(t: Kelvin, jitter_seed: Option<u64>) -> Result<IlluminantSpd> {
    let grid = *cie1931().grid();
    planckian_spd_on(grid, t, jitter_seed)
}

/// As [`planckian_spd`] on an arbitrary grid. The ȳ normalization is always
/// computed on the 5 nm CMF grid so that spectra on different grids describe
/// the same physical light.
pub fn planckian_spd_on(grid: WavelengthGrid, t: Kelvin, jitter_seed: Option<u64>) -> Result<IlluminantSpd> {
    let kelvin = t.value();
    if !(SPD_MIN_K..=SPD_MAX_K).contains(&kelvin) {
        return Err(Error::OutOfRange {
            what: "illuminant temperature",
            value: kelvin,
            lo: SPD_MIN_K,
            hi: SPD_MAX_K,
        });
    }
    let profile: Box<dyn Fn(f64) -> f64> = match jitter_seed {
        Some(seed) => Box::new(spd_jitter_profile(seed)),
        None => Box::new(|_| 1.0),
    };
    let raw = |w: f64| planck_radiance(w, kelvin) * profile(w);
    let cmf = cie1931();
    let luminance = cmf
        .grid()
        .trapezoid(|i| raw(cmf.grid().wavelength(i)) * cmf.ybar()[i]);
    let values = grid.wavelengths().map(|w| raw(w) / luminance).collect();
    Ok(IlluminantSpd {
        grid,
        values,
        nominal_cct: t,
        family: if jitter_seed.is_some() {
            SpdFamily::PlanckianJittered
        } else {
            SpdFamily::Planckian
        },
    })
}

fn check_grids(css: &CameraCss, spd: &IlluminantSpd) -> Result<()> {
    if !css.grid().same_as(spd.grid()) {
        return Err(Error::invalid(format!(
            "wavelength grid mismatch: camera {:?} vs illuminant {:?}",
            css.grid(),
            spd.grid()
        )));
    }
    Ok(())
}

/// Raw camera response `∫ E(λ) S(λ) R_k(λ) dλ` for one reflectance curve.
fn camera_response(css: &CameraCss, spd: &IlluminantSpd, reflectance: Option<&[f64]>) -> [f64; 3] {
    let grid = css.grid();
    let e = spd.values();
    [0, 1, 2].map(|k| {
        let r = css.curve(k);
        match reflectance {
            Some(s) => grid.trapezoid(|i| e[i] * s[i] * r[i]),
            None => grid.trapezoid(|i| e[i] * r[i]),
        }
    })
}

/// Ground-truth illuminant color of `spd` as seen by `css`.
pub fn illuminant_rgb(css: &CameraCss, spd: &IlluminantSpd) -> Result<IlluminantRgb> {
    check_grids(css, spd)?;
    IlluminantRgb::from_array(camera_response(css, spd, None))
}

/// Piecewise-constant reflectance: a background curve overlaid by
/// axis-aligned rectangles, each carrying one curve from `bank`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectancePatchSet {
    width: usize,
    height: usize,
    bank: Vec<Vec<f64>>,
    background: usize,
    /// (x0, y0, x1, y1, bank index), half-open rectangles, later ones on top.
    patches: Vec<(usize, usize, usize, usize, usize)>,
}

impl ReflectancePatchSet {
    /// A spectrally flat surface with reflectance `value` everywhere.
    pub fn uniform(grid: &WavelengthGrid, width: usize, height: usize, value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::invalid(format!("reflectance {value} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            bank: vec![vec![value; grid.len()]],
            background: 0,
            patches: Vec::new(),
        })
    }

    pub fn new(
        width: usize,
        height: usize,
        bank: Vec<Vec<f64>>,
        background: usize,
        patches: Vec<(usize, usize, usize, usize, usize)>,
    ) -> Result<Self> {
        if bank.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("reflectance samples must lie in [0, 1]"));
        }
        if background >= bank.len() || patches.iter().any(|p| p.4 >= bank.len()) {
            return Err(Error::invalid("reflectance patch refers to a missing curve"));
        }
        if patches
            .iter()
            .any(|&(x0, y0, x1, y1, _)| x0 >= x1 || y0 >= y1 || x1 > width || y1 > height)
        {
            return Err(Error::invalid("reflectance patch outside the scene"));
        }
        Ok(Self {
            width,
            height,
            bank,
            background,
            patches,
        })
    }

    /// Random scene: rectangles over a background, each patch curve a
    /// clipped sum of three Gaussians in wavelength.
    pub fn random<R: Rng>(grid: &WavelengthGrid, width: usize, height: usize, style: &SceneStyle, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&style.chroma) {
            return Err(Error::invalid(format!("reflectance chroma {} outside [0, 1]", style.chroma)));
        }
        let background = if style.neutral_background {
            vec![rng.gen_range(0.2..0.6); grid.len()]
        } else {
            random_reflectance(grid, style.chroma, rng)
        };
        let mut bank = vec![background];
        bank.extend((0..style.patches).map(|_| random_reflectance(grid, style.chroma, rng)));
        let patches = (0..style.patches)
            .map(|i| {
                let w = rng.gen_range(1..=width.max(2) / 2);
                let h = rng.gen_range(1..=height.max(2) / 2);
                let x0 = rng.gen_range(0..=width - w);
                let y0 = rng.gen_range(0..=height - h);
                (x0, y0, x0 + w, y0 + h, i + 1)
            })
            .collect();
        Self::new(width, height, bank, 0, patches)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn curve_len(&self) -> usize {
        self.bank[0].len()
    }

    /// Bank index of the curve visible at (x, y).
    fn curve_index(&self, x: usize, y: usize) -> usize {
        self.patches
            .iter()
            .rev()
            .find(|&&(x0, y0, x1, y1, _)| x >= x0 && x < x1 && y >= y0 && y < y1)
            .map(|p| p.4)
            .unwrap_or(self.background)
    }
}

/// Content statistics of random scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneStyle {
    pub patches: usize,
    /// Upper bound on the amplitude of each reflectance bump.
    pub chroma: f64,
    /// Spectrally flat grey background instead of a random curve.
    pub neutral_background: bool,
}

impl Default for SceneStyle {
    fn default() -> Self {
        Self {
            patches: 12,
            chroma: 0.25,
            neutral_background: true,
        }
    }
}

fn random_reflectance<R: Rng>(grid: &WavelengthGrid, chroma: f64, rng: &mut R) -> Vec<f64> {
    let base: f64 = rng.gen_range(0.05..0.3);
    let bumps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(400.0..700.0),
                rng.gen_range(20.0..90.0),
                rng.gen_range(0.0..=chroma),
            )
        })
        .collect();
    grid.wavelengths()
        .map(|w| {
            let v = base
                + bumps
                    .iter()
                    .map(|(c, s, a)| a * (-0.5 * ((w - c) / s).powi(2)).exp())
                    .sum::<f64>();
            v.clamp(0.0, 1.0)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorNoise {
    /// Standard deviation as a fraction of full scale.
    pub sigma: f64,
    pub seed: u64,
}

/// Default additive noise: 0.5% of full scale.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.005;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub image: RgbImage,
    pub gt_illuminant: IlluminantRgb,
    pub camera_id: String,
    pub nominal_cct: Kelvin,
}

/// Renders the sensor response pixel by pixel, adds optional Gaussian noise
/// and clamps to [0, 1].
pub fn render_scene(
    css: &CameraCss,
    spd: &IlluminantSpd,
    patches: &ReflectancePatchSet,
    noise: Option<SensorNoise>,
) -> Result<SynthScene> {
    check_grids(css, spd)?;
    if patches.curve_len() != css.grid().len() {
        return Err(Error::invalid("reflectance curves are not on the camera grid"));
    }
    if patches.width() < 4 || patches.height() < 4 {
        return Err(Error::invalid(format!(
            "scene size {}x{} is below the 4x4 minimum",
            patches.width(),
            patches.height()
        )));
    }
    let gt = illuminant_rgb(css, spd)?;
    let responses: Vec<[f64; 3]> = patches
        .bank
        .iter()
        .map(|s| camera_response(css, spd, Some(s)))
        .collect();
    let mut image = RgbImage::new(patches.width(), patches.height());
    for y in 0..patches.height() {
        for x in 0..patches.width() {
            let r = responses[patches.curve_index(x, y)];
            image.set(x, y, r.map(|v| v as f32));
        }
    }
    if let Some(noise) = noise {
        if noise.sigma > 0.0 {
            let normal = Normal::new(0.0, noise.sigma).map_err(|e| Error::invalid(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
            for v in image.data_mut() {
                *v += normal.sample(&mut rng) as f32;
            }
        }
    }
    for v in image.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(SynthScene {
        image,
        gt_illuminant: gt,
        camera_id: css.camera_id().to_owned(),
        nominal_cct: spd.nominal_cct(),
    })
}

/// Dataset generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub cameras: usize,
    pub scenes_per_camera: usize,
    pub image_size: usize,
    /// Illuminant temperature groups; a scene picks a group uniformly and a
    /// temperature log-uniformly inside it.
    pub cct_groups: Vec<(f64, f64)>,
    pub css_jitter: f64,
    pub noise_sigma: f64,
    pub scene_style: SceneStyle,
    /// Fraction of illuminants that get the smooth off-locus perturbation.
    pub spd_jitter_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            cameras: 4,
            scenes_per_camera: 60,
            image_size: 32,
            cct_groups: vec![(2500.0, 3500.0), (6500.0, 9000.0)],
            css_jitter: 0.15,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            scene_style: SceneStyle::default(),
            spd_jitter_fraction: 0.5,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cameras < 3 {
            return Err(Error::invalid(format!("need at least 3 cameras, got {}", self.cameras)));
        }
        if self.scenes_per_camera < 40 {
            return Err(Error::invalid(format!(
                "need at least 40 scenes per camera, got {}",
                self.scenes_per_camera
            )));
        }
        if self.image_size < 4 {
            return Err(Error::invalid("image size must be at least 4"));
        }
        if self.cct_groups.is_empty() {
            return Err(Error::invalid("no illuminant temperature groups"));
        }
        for &(lo, hi) in &self.cct_groups {
            if !(SPD_MIN_K <= lo && lo <= hi && hi <= SPD_MAX_K) {
                return Err(Error::invalid(format!(
                    "temperature group [{lo}, {hi}] outside [{SPD_MIN_K}, {SPD_MAX_K}]"
                )));
            }
        }
        let lo = self.cct_groups.iter().map(|g| g.0).fold(f64::INFINITY, f64::min);
        let hi = self.cct_groups.iter().map(|g| g.1).fold(0.0, f64::max);
        if lo > 4000.0 || hi < 5500.0 {
            return Err(Error::invalid(format!(
                "temperature range [{lo}, {hi}] must reach warm (<= 4000 K) and cold (>= 5500 K) light"
            )));
        }
        if !(0.0..=MAX_CSS_JITTER).contains(&self.css_jitter) {
            return Err(Error::invalid(format!("CSS jitter {} outside [0, 0.3]", self.css_jitter)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise sigma must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.spd_jitter_fraction) {
            return Err(Error::invalid("spd jitter fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn camera_id(&self, index: usize) -> String {
        format!("cam{index:02}")
    }

    /// The sensor of camera `index` under this configuration.
    pub fn camera(&self, index: usize) -> Result<CameraCss> {
        let id = self.camera_id(index);
        make_css_named(id.clone(), derive_seed(self.seed, &["css", &id]), self.css_jitter)
    }
}

/// One manifest row as produced by the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecord {
    pub path: String,
    pub camera_id: String,
    pub gt: IlluminantRgb,
    pub nominal_cct: f64,
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub manifest_path: PathBuf,
    pub records: Vec<SynthRecord>,
}

/// Generates scene `index` of camera `css` exactly as the dataset writer does.
pub fn synth_scene(config: &SynthConfig, css: &CameraCss, index: usize) -> Result<SynthScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        config.seed,
        &["scene", css.camera_id(), &index.to_string()],
    ));
    let (lo, hi) = config.cct_groups[rng.gen_range(0..config.cct_groups.len())];
    let t = (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp();
    let jitter_seed = (rng.gen::<f64>() < config.spd_jitter_fraction).then(|| rng.gen::<u64>());
    let spd = planckian_spd(Kelvin::new(t)?, jitter_seed)?;
    let patches = ReflectancePatchSet::random(
        css.grid(),
        config.image_size,
        config.image_size,
        &config.scene_style,
        &mut rng,
    )?;
    let noise = SensorNoise {
        sigma: config.noise_sigma,
        seed: rng.gen(),
    };
    render_scene(css, &spd, &patches, Some(noise))
}

/// Linear [0, 1] samples to 16-bit RGB PNG.
pub fn write_png16(path: &Path, image: &RgbImage) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), image.width() as u32, image.height() as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Sixteen);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut bytes = Vec::with_capacity(image.data().len() * 2);
    for &v in image.data() {
        let q = (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

pub const MANIFEST_HEADER: [&str; 6] = ["path", "camera_id", "gt_r", "gt_g", "gt_b", "nominal_cct"];

/// Renders every scene and writes `images/<camera>/<index>.png` plus
/// `manifest.csv` under `out_dir`.
pub fn generate_dataset(config: &SynthConfig, out_dir: &Path) -> Result<GeneratedDataset> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(config.cameras * config.scenes_per_camera);
    for cam in 0..config.cameras {
        let css = config.camera(cam)?;
        let cam_dir = out_dir.join("images").join(css.camera_id());
        fs::create_dir_all(&cam_dir).map_err(|e| Error::io(&cam_dir, e))?;
        let scenes: Vec<SynthScene> = (0..config.scenes_per_camera)
            .into_par_iter()
            .map(|i| synth_scene(config, &css, i))
            .collect::<Result<_>>()?;
        for (i, scene) in scenes.into_iter().enumerate() {
            let rel = format!("images/{}/{:04}.png", css.camera_id(), i);
            write_png16(&out_dir.join(&rel), &scene.image)?;
            records.push(SynthRecord {
                path: rel,
                camera_id: scene.camera_id,
                gt: scene.gt_illuminant,
                nominal_cct: scene.nominal_cct.value(),
            });
        }
    }
    let manifest_path = out_dir.join("manifest.csv");
    write_manifest(&manifest_path, &records)?;
    Ok(GeneratedDataset {
        manifest_path,
        records,
    })
}

fn write_manifest(path: &Path, records: &[SynthRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    for r in records {
        let gt = r.gt.to_array();
        w.write_record([
            r.path.clone(),
            r.camera_id.clone(),
            gt[0].to_string(),
            gt[1].to_string(),
            gt[2].to_string(),
            r.nominal_cct.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colorsci::{angular_error, planckian_chromaticity, rgb_to_xy};

    fn k(t: f64) -> Kelvin {
        Kelvin::new(t).unwrap()
    }

    #[test]
    fn zero_jitter_is_canonical() {
        let a = make_css(1, 0.0).unwrap();
        let b = make_css(99, 0.0).unwrap();
        assert_eq!(a.curves, b.curves);
        assert_eq!(a.peaks(), [620.0, 545.0, 450.0]);
    }

    #[test]
    fn canonical_sensor_reads_blackbody_temperature() {
        let css = make_css(0, 0.0).unwrap();
        for t in [2500.0, 3000.0, 4000.0, 5000.0, 6500.0, 9000.0] {
            let rgb = illuminant_rgb(&css, &planckian_spd(k(t), None).unwrap()).unwrap();
            let est = crate::colorsci::cct_from_xy(&rgb_to_xy(&rgb).unwrap()).unwrap().value();
            assert!((est - t).abs() / t < 0.01, "{t} K read as {est}");
        }
    }

    #[test]
    fn css_deterministic_and_ordered() {
        let a = make_css(5, 0.2).unwrap();
        let b = make_css(5, 0.2).unwrap();
        assert_eq!(a, b);
        let c = make_css(6, 0.2).unwrap();
        let shift = a
            .peaks()
            .iter()
            .zip(c.peaks())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        assert!(shift > 0.5, "peaks barely moved: {shift}");
        for css in [&a, &c] {
            let [r, g, b] = css.peaks();
            assert!(b < g && g < r);
            for ch in 0..3 {
                assert!(css.curve(ch).iter().all(|&v| v >= 0.0));
            }
        }
        assert!(make_css(1, 0.31).is_err());
    }

    #[test]
    fn spd_chromaticity_matches_locus() {
        let spd = planckian_spd(k(5000.0), None).unwrap();
        let cmf = cie1931();
        let [x, y, z] = cmf.tristimulus(spd.values());
        let s = x + y + z;
        let locus = planckian_chromaticity(k(5000.0));
        assert!((x / s - locus.x()).abs() < 1e-6);
        assert!((y / s - locus.y()).abs() < 1e-6);
        // normalization
        assert!((y - 1.0).abs() < 1e-12);
        assert!(planckian_spd(Kelvin::new(1700.0).unwrap(), None).is_err());
    }

    #[test]
    fn jittered_spd_moves_off_locus_but_stays_positive() {
        let plain = planckian_spd(k(5000.0), None).unwrap();
        let jit = planckian_spd(k(5000.0), Some(3)).unwrap();
        assert_eq!(jit.family(), SpdFamily::PlanckianJittered);
        assert!(jit.values().iter().all(|&v| v > 0.0));
        assert_ne!(plain.values(), jit.values());
    }

    #[test]
    fn warm_light_is_redder() {
        let css = make_css(0, 0.0).unwrap();
        let warm = illuminant_rgb(&css, &planckian_spd(k(2800.0), None).unwrap()).unwrap();
        let cold = illuminant_rgb(&css, &planckian_spd(k(8000.0), None).unwrap()).unwrap();
        assert!(warm.r() / warm.b() > cold.r() / cold.b());
    }

    #[test]
    fn illuminant_rgb_is_linear() {
        let css = make_css(0, 0.0).unwrap();
        let spd = planckian_spd(k(4000.0), None).unwrap();
        let a = illuminant_rgb(&css, &spd).unwrap().to_array();
        let b = illuminant_rgb(&css, &spd.scaled(3.0)).unwrap().to_array();
        for i in 0..3 {
            assert!((b[i] - 3.0 * a[i]).abs() <= 1e-12 * b[i].abs());
        }
        let mut css2 = css.clone();
        css2.curves_mut()[1].iter_mut().for_each(|v| *v *= 0.5);
        let c = illuminant_rgb(&css2, &spd).unwrap().to_array();
        assert!((c[1] - 0.5 * a[1]).abs() < 1e-12);
        assert_eq!(c[0], a[0]);
    }

    #[test]
    fn narrow_band_light_isolates_red() {
        let css = make_css(0, 0.0).unwrap();
        let mut spd = planckian_spd(k(5000.0), None).unwrap();
        let grid = *spd.grid();
        for (i, v) in spd.values.iter_mut().enumerate() {
            *v = if (grid.wavelength(i) - 700.0).abs() < 1e-9 { 1.0 } else { 0.0 };
        }
        let rgb = illuminant_rgb(&css, &spd).unwrap().to_array();
        assert!(rgb[0] > 0.0);
        // Gaussian tails never vanish exactly
        assert!(rgb[1] < 1e-2 * rgb[0] && rgb[2] < 1e-6 * rgb[0], "{rgb:?}");
    }

    #[test]
    fn illuminant_rgb_converges_with_grid_resolution() {
        let css5 = make_css(0, 0.0).unwrap();
        let fine = WavelengthGrid::visible(1.0).unwrap();
        let css1 = css5.resampled(fine).unwrap();
        let spd5 = planckian_spd(k(6500.0), None).unwrap();
        let spd1 = planckian_spd_on(fine, k(6500.0), None).unwrap();
        let a = illuminant_rgb(&css5, &spd5).unwrap().to_array();
        let b = illuminant_rgb(&css1, &spd1).unwrap().to_array();
        for i in 0..3 {
            assert!((a[i] - b[i]).abs() / b[i] < 1e-3, "channel {i}: {} vs {}", a[i], b[i]);
        }
        // regression value recorded at first computation
        let expected = [0.475_822_4, 0.379_162_6, 0.461_018_0];
        for i in 0..3 {
            assert!((a[i] - expected[i]).abs() < 1e-5, "{a:?}");
        }
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let css = make_css(0, 0.0).unwrap().resampled(WavelengthGrid::visible(1.0).unwrap()).unwrap();
        let spd = planckian_spd(k(6500.0), None).unwrap();
        assert!(illuminant_rgb(&css, &spd).is_err());
    }

    #[test]
    fn flat_white_scene_equals_ground_truth() {
        let css = make_css(4, 0.15).unwrap();
        let spd = planckian_spd(k(3300.0), Some(1)).unwrap();
        let white = ReflectancePatchSet::uniform(css.grid(), 8, 6, 1.0).unwrap();
        let scene = render_scene(&css, &spd, &white, None).unwrap();
        let gt = scene.gt_illuminant.to_array().map(|v| v as f32);
        assert!(scene.image.pixels().all(|p| p == gt));

        let black = ReflectancePatchSet::uniform(css.grid(), 8, 6, 0.0).unwrap();
        let scene = render_scene(&css, &spd, &black, None).unwrap();
        assert!(scene.image.data().iter().all(|&v| v == 0.0));
        assert!(scene.gt_illuminant.norm() > 0.0);

        let tiny = ReflectancePatchSet::uniform(css.grid(), 3, 6, 0.5).unwrap();
        assert!(render_scene(&css, &spd, &tiny, None).is_err());
    }

    #[test]
    fn flat_scene_ratio_between_cameras() {
        let a = make_css(1, 0.2).unwrap();
        let b = make_css(2, 0.2).unwrap();
        let spd = planckian_spd(k(4500.0), None).unwrap();
        let grey = ReflectancePatchSet::uniform(a.grid(), 5, 5, 0.4).unwrap();
        let sa = render_scene(&a, &spd, &grey, None).unwrap();
        let sb = render_scene(&b, &spd, &grey, None).unwrap();
        let (ga, gb) = (sa.gt_illuminant.to_array(), sb.gt_illuminant.to_array());
        for (pa, pb) in sa.image.pixels().zip(sb.image.pixels()) {
            for k in 0..3 {
                let ratio = pa[k] as f64 / pb[k] as f64;
                assert!((ratio - ga[k] / gb[k]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn camera_centroids_separate() {
        let config = SynthConfig::default();
        let centroid = |cam: usize| {
            let css = config.camera(cam).unwrap();
            let mut acc = [0.0; 3];
            for i in 0..40 {
                let g = synth_scene(&config, &css, i).unwrap().gt_illuminant.normalized();
                for k in 0..3 {
                    acc[k] += g[k];
                }
            }
            IlluminantRgb::from_array(acc).unwrap()
        };
        let c: Vec<_> = (0..3).map(centroid).collect();
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(angular_error(&c[i], &c[j]) > 0.5, "cameras {i},{j}");
            }
        }
    }

    #[test]
    fn random_scene_reflectances_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = *cie1931().grid();
        let p = ReflectancePatchSet::random(&grid, 16, 16, &SceneStyle { patches: 10, chroma: 0.6, neutral_background: false }, &mut rng).unwrap();
        assert!(p.bank.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        let css = make_css(0, 0.0).unwrap();
        let spd = planckian_spd(k(5000.0), None).unwrap();
        let scene = render_scene(&css, &spd, &p, None).unwrap();
        let xy = rgb_to_xy(&scene.gt_illuminant).unwrap();
        assert!(xy.x() > 0.2 && xy.x() < 0.5);
    }
}
