//! Dataset manifests, PNG decoding and the network-input preprocessing
//! pipeline.
//!
//! Manifest CSV columns (header names are exact):
//!
//! | column | required | meaning |
//! |---|---|---|
//! | `path` | yes | image path, relative to the manifest's directory |
//! | `camera_id` | yes | non-empty camera name |
//! | `gt_r`, `gt_g`, `gt_b` | yes | ground-truth illuminant, linear RGB |
//! | `nominal_cct` | no | nominal illuminant temperature (synthetic data) |
//! | `mask_x0`, `mask_y0`, `mask_x1`, `mask_y1` | no | calibration-object rectangle, pixels, half-open |
//! | `black_level` | no | black level in raw code values of the image's bit depth |
//!
//! Preprocessing runs, in order: black-level subtraction (clamped at 0),
//! quantization of deeper inputs to 8 bits, scaling to [0, 1], gamma
//! `v^(1/2.2)`, and zeroing of masked rectangles.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::colorsci::{IlluminantRgb, Kelvin};
use crate::error::{Error, Result};
use crate::image::RgbImage;

pub const GAMMA: f64 = 2.2;

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    /// Row index in the manifest; the image id used everywhere downstream.
    pub id: usize,
    pub rel_path: String,
    pub path: PathBuf,
    pub camera_id: String,
    pub gt: IlluminantRgb,
    pub nominal_cct: Option<f64>,
    pub masks: Vec<MaskRect>,
    pub black_level: f64,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    /// Camera ids in first-appearance order.
    pub fn cameras(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.camera_id) {
                out.push(r.camera_id.clone());
            }
        }
        out
    }

    pub fn records_for<'a>(&'a self, camera: &'a str) -> impl Iterator<Item = &'a ManifestRecord> + 'a {
        self.records.iter().filter(move |r| r.camera_id == camera)
    }
}

const REQUIRED: [&str; 5] = ["path", "camera_id", "gt_r", "gt_g", "gt_b"];
const MASK_COLUMNS: [&str; 4] = ["mask_x0", "mask_y0", "mask_x1", "mask_y1"];

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut required = [0usize; 5];
    for (slot, name) in required.iter_mut().zip(REQUIRED) {
        *slot = col(name).ok_or_else(|| Error::format(path, format!("missing required column `{name}`")))?;
    }
    let cct_col = col("nominal_cct");
    let black_col = col("black_level");
    let mask_cols: Vec<Option<usize>> = MASK_COLUMNS.iter().map(|n| col(n)).collect();
    if mask_cols.iter().any(Option::is_some) && mask_cols.iter().any(Option::is_none) {
        return Err(Error::format(path, "mask columns must appear together (mask_x0..mask_y1)"));
    }

    let mut records = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, format!("row {}: {e}", row + 1)))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let number = |i: usize, name: &str| -> Result<f64> {
            field(i).parse::<f64>().map_err(|_| {
                Error::format(path, format!("row {}: `{name}` is not a number: {:?}", row + 1, field(i)))
            })
        };
        let rel_path = field(required[0]).to_owned();
        let camera_id = field(required[1]).to_owned();
        if camera_id.is_empty() {
            return Err(Error::format(path, format!("row {}: empty camera_id", row + 1)));
        }
        let gt = IlluminantRgb::new(
            number(required[2], "gt_r")?,
            number(required[3], "gt_g")?,
            number(required[4], "gt_b")?,
        )
        .map_err(|e| Error::format(path, format!("row {}: {e}", row + 1)))?;
        let nominal_cct = match cct_col {
            Some(i) if !field(i).is_empty() => Some(number(i, "nominal_cct")?),
            _ => None,
        };
        let black_level = match black_col {
            Some(i) if !field(i).is_empty() => {
                let b = number(i, "black_level")?;
                if b < 0.0 {
                    return Err(Error::format(path, format!("row {}: negative black level", row + 1)));
                }
                b
            }
            _ => 0.0,
        };
        let mut masks = Vec::new();
        if let [Some(a), Some(b), Some(c), Some(d)] = mask_cols[..] {
            if [a, b, c, d].iter().any(|&i| !field(i).is_empty()) {
                let v: Vec<usize> = [(a, "mask_x0"), (b, "mask_y0"), (c, "mask_x1"), (d, "mask_y1")]
                    .iter()
                    .map(|&(i, n)| {
                        field(i).parse::<usize>().map_err(|_| {
                            Error::format(path, format!("row {}: `{n}` is not a pixel index", row + 1))
                        })
                    })
                    .collect::<Result<_>>()?;
                if v[0] >= v[2] || v[1] >= v[3] {
                    return Err(Error::format(path, format!("row {}: empty mask rectangle", row + 1)));
                }
                masks.push(MaskRect {
                    x0: v[0],
                    y0: v[1],
                    x1: v[2],
                    y1: v[3],
                });
            }
        }
        let full = root.join(&rel_path);
        if !full.is_file() {
            return Err(Error::format(
                path,
                format!("row {}: image {} does not exist", row + 1, full.display()),
            ));
        }
        records.push(ManifestRecord {
            id: records.len(),
            rel_path,
            path: full,
            camera_id,
            gt,
            nominal_cct,
            masks,
            black_level,
        });
    }
    Ok(DatasetManifest { root, records })
}

/// Decoded integer samples, interleaved RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub bit_depth: u8,
    pub data: Vec<u16>,
}

pub fn decode_png(path: &Path) -> Result<RawImage> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::format(path, format!("unsupported PNG color type {other:?}"))),
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let (bit_depth, samples): (u8, Vec<u16>) = match info.bit_depth {
        png::BitDepth::Eight => (8, bytes.iter().map(|&b| b as u16).collect()),
        png::BitDepth::Sixteen => (
            16,
            bytes.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect(),
        ),
        other => return Err(Error::format(path, format!("unsupported PNG bit depth {other:?}"))),
    };
    let data = if channels == 3 {
        samples
    } else {
        samples.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect()
    };
    Ok(RawImage {
        width,
        height,
        bit_depth,
        data,
    })
}

/// A network-ready image: gamma-encoded values in [0, 1], with masked
/// pixels zeroed and flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedImage {
    pub id: usize,
    pub image: RgbImage,
    /// `false` where a calibration object was masked out.
    pub valid: Vec<bool>,
    pub camera_id: String,
    pub gt: IlluminantRgb,
    /// Filled in by the task builder.
    pub cct: Option<Kelvin>,
}

impl ProcessedImage {
    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

fn check_masks(raw_w: usize, raw_h: usize, masks: &[MaskRect]) -> Result<()> {
    for m in masks {
        if m.x1 > raw_w || m.y1 > raw_h || m.x0 >= m.x1 || m.y0 >= m.y1 {
            return Err(Error::invalid(format!(
                "mask rectangle {m:?} outside a {raw_w}x{raw_h} image"
            )));
        }
    }
    Ok(())
}

/// Steps 1–3 and 5 of the pipeline: linear values in [0, 1] on an 8-bit
/// lattice, with masks applied. Returns the image and the validity mask.
pub fn preprocess_linear(raw: &RawImage, black_level: f64, masks: &[MaskRect]) -> Result<(RgbImage, Vec<bool>)> {
    if raw.bit_depth != 8 && raw.bit_depth != 16 {
        return Err(Error::invalid(format!("unsupported bit depth {}", raw.bit_depth)));
    }
    if raw.data.len() != raw.width * raw.height * 3 {
        return Err(Error::invalid("raw image buffer does not match its size"));
    }
    check_masks(raw.width, raw.height, masks)?;
    let full_scale = ((1u32 << raw.bit_depth) - 1) as f64;
    let data = raw
        .data
        .iter()
        .map(|&v| {
            let v = (v as f64 - black_level).max(0.0);
            let code8 = if raw.bit_depth > 8 {
                (v * 255.0 / full_scale).round()
            } else {
                v.round()
            };
            (code8.min(255.0) / 255.0) as f32
        })
        .collect();
    let mut image = RgbImage::from_vec(raw.width, raw.height, data);
    let mut valid = vec![true; raw.width * raw.height];
    for m in masks {
        for y in m.y0..m.y1 {
            for x in m.x0..m.x1 {
                image.set(x, y, [0.0; 3]);
                valid[y * raw.width + x] = false;
            }
        }
    }
    Ok((image, valid))
}

pub fn gamma_encode(v: f32) -> f32 {
    (v as f64).powf(1.0 / GAMMA) as f32
}

pub fn gamma_decode(v: f32) -> f32 {
    (v as f64).powf(GAMMA) as f32
}

/// Full pipeline for one manifest record.
pub fn preprocess(raw: &RawImage, record: &ManifestRecord) -> Result<ProcessedImage> {
    let (mut image, valid) = preprocess_linear(raw, record.black_level, &record.masks)?;
    for v in image.data_mut() {
        *v = gamma_encode(*v);
    }
    Ok(ProcessedImage {
        id: record.id,
        image,
        valid,
        camera_id: record.camera_id.clone(),
        gt: record.gt,
        cct: None,
    })
}

/// Decodes and preprocesses every record of the manifest, in order.
pub fn load_images(manifest: &DatasetManifest) -> Result<Vec<ProcessedImage>> {
    use rayon::prelude::*;
    manifest
        .records
        .par_iter()
        .map(|r| preprocess(&decode_png(&r.path)?, r))
        .collect()
}

/// Bilinear resample of the `side × side` window at (`x0`, `y0`) to
/// `out × out`. Sample centers sit at half-pixel offsets (align-corners
/// false): output pixel j reads source coordinate `(j + 0.5) * side / out - 0.5`,
/// clamped to the window.
pub fn resample_window(img: &RgbImage, x0: usize, y0: usize, side: usize, out: usize) -> RgbImage {
    let mut dst = RgbImage::new(out, out);
    let scale = side as f64 / out as f64;
    let coord = |j: usize| {
        let s = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(side - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let xs: Vec<_> = (0..out).map(coord).collect();
    let ys: Vec<_> = (0..out).map(coord).collect();
    for (j, &(r0, r1, wy)) in ys.iter().enumerate() {
        for (i, &(c0, c1, wx)) in xs.iter().enumerate() {
            let p00 = img.get(x0 + c0, y0 + r0);
            let p01 = img.get(x0 + c1, y0 + r0);
            let p10 = img.get(x0 + c0, y0 + r1);
            let p11 = img.get(x0 + c1, y0 + r1);
            let mut v = [0.0f32; 3];
            for k in 0..3 {
                let top = if wx == 0.0 { p00[k] } else { p00[k] + (p01[k] - p00[k]) * wx };
                let bot = if wx == 0.0 { p10[k] } else { p10[k] + (p11[k] - p10[k]) * wx };
                v[k] = if wy == 0.0 { top } else { top + (bot - top) * wy };
            }
            dst.set(i, j, v);
        }
    }
    dst
}

/// Random square crop with side uniform in `[out, min(H, W)]`, placed
/// uniformly, resized to `out × out`.
pub fn crop_resize<R: Rng + ?Sized>(img: &ProcessedImage, out: usize, rng: &mut R) -> Result<RgbImage> {
    let max_side = img.width().min(img.height());
    if out == 0 || out > max_side {
        return Err(Error::invalid(format!(
            "cannot crop {out}x{out} from a {}x{} image",
            img.width(),
            img.height()
        )));
    }
    let side = rng.gen_range(out..=max_side);
    let x0 = rng.gen_range(0..=img.width() - side);
    let y0 = rng.gen_range(0..=img.height() - side);
    Ok(resample_window(&img.image, x0, y0, side, out))
}

/// Deterministic variant: the largest centered square, resized.
pub fn center_resize(img: &ProcessedImage, out: usize) -> Result<RgbImage> {
    let side = img.width().min(img.height());
    if out == 0 || out > side {
        return Err(Error::invalid(format!(
            "cannot resize a {}x{} image to {out}x{out}",
            img.width(),
            img.height()
        )));
    }
    let x0 = (img.width() - side) / 2;
    let y0 = (img.height() - side) / 2;
    Ok(resample_window(&img.image, x0, y0, side, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn raw16(w: usize, h: usize, v: u16) -> RawImage {
        RawImage {
            width: w,
            height: h,
            bit_depth: 16,
            data: vec![v; w * h * 3],
        }
    }

    fn record(black: f64, masks: Vec<MaskRect>) -> ManifestRecord {
        ManifestRecord {
            id: 0,
            rel_path: "x.png".into(),
            path: "x.png".into(),
            camera_id: "c".into(),
            gt: IlluminantRgb::new(1.0, 1.0, 1.0).unwrap(),
            nominal_cct: None,
            masks,
            black_level: black,
        }
    }

    #[test]
    fn full_scale_maps_to_one() {
        let p = preprocess(&raw16(2, 2, 65535), &record(0.0, vec![])).unwrap();
        assert!(p.image.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn black_level_is_a_fixed_point() {
        let p = preprocess(&raw16(2, 2, 2048), &record(2048.0, vec![])).unwrap();
        assert!(p.image.data().iter().all(|&v| v == 0.0));
        let p = preprocess(&raw16(2, 2, 1000), &record(2048.0, vec![])).unwrap();
        assert!(p.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gamma_of_mid_grey() {
        // 0.5^(1/2.2) at 50 digits: 0.729740052840723...
        assert!((gamma_encode(0.5) as f64 - 0.729_740_052_840_723).abs() < 1e-6);
    }

    #[test]
    fn eight_bit_quantization_rounds() {
        // 65535 = 255 * 257, so 8-bit code c sits at 16-bit 257 c; 128.5 * 257 = 33024.5
        let (img, _) = preprocess_linear(&raw16(1, 1, 33025), 0.0, &[]).unwrap();
        assert_eq!(img.data()[0], 129.0 / 255.0);
        let (img, _) = preprocess_linear(&raw16(1, 1, 33024), 0.0, &[]).unwrap();
        assert_eq!(img.data()[0], 128.0 / 255.0);
        let raw8 = RawImage {
            width: 1,
            height: 1,
            bit_depth: 8,
            data: vec![200, 100, 0],
        };
        let (img, _) = preprocess_linear(&raw8, 0.0, &[]).unwrap();
        assert_eq!(img.data(), &[200.0 / 255.0, 100.0 / 255.0, 0.0]);
    }

    #[test]
    fn masks_zero_and_flag() {
        let m = MaskRect {
            x0: 1,
            y0: 0,
            x1: 3,
            y1: 2,
        };
        let p = preprocess(&raw16(4, 3, 40000), &record(0.0, vec![m])).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                let inside = (1..3).contains(&x) && y < 2;
                assert_eq!(p.valid[y * 4 + x], !inside);
                if inside {
                    assert_eq!(p.image.get(x, y), [0.0; 3]);
                }
            }
        }
        assert_eq!(p.valid_count(), 8);
        let bad = MaskRect {
            x0: 2,
            y0: 0,
            x1: 5,
            y1: 1,
        };
        assert!(preprocess(&raw16(4, 3, 1), &record(0.0, vec![bad])).is_err());
    }

    #[test]
    fn linear_steps_are_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw = RawImage {
            width: 5,
            height: 4,
            bit_depth: 16,
            data: (0..60).map(|_| rng.gen()).collect(),
        };
        let m = [MaskRect {
            x0: 0,
            y0: 0,
            x1: 2,
            y1: 2,
        }];
        let (once, valid) = preprocess_linear(&raw, 300.0, &m).unwrap();
        let again_raw = RawImage {
            width: 5,
            height: 4,
            bit_depth: 8,
            data: once.data().iter().map(|&v| (v * 255.0).round() as u16).collect(),
        };
        let (twice, valid2) = preprocess_linear(&again_raw, 0.0, &m).unwrap();
        assert_eq!(once, twice);
        assert_eq!(valid, valid2);
    }

    fn processed(img: RgbImage) -> ProcessedImage {
        let n = img.width() * img.height();
        ProcessedImage {
            id: 0,
            image: img,
            valid: vec![true; n],
            camera_id: "c".into(),
            gt: IlluminantRgb::new(1.0, 1.0, 1.0).unwrap(),
            cct: None,
        }
    }

    #[test]
    fn crop_of_output_size_is_exact_copy() {
        let mut img = RgbImage::new(4, 4);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = i as f32 / 48.0;
        }
        let out = resample_window(&img, 1, 2, 2, 2);
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(out.get(x, y), img.get(x + 1, y + 2));
            }
        }
        let p = processed(RgbImage::filled(6, 5, [0.3, 0.6, 0.9]));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let out = crop_resize(&p, 3, &mut rng).unwrap();
            assert!(out.pixels().all(|px| px == [0.3, 0.6, 0.9]));
        }
        assert!(crop_resize(&p, 6, &mut rng).is_err());
    }

    #[test]
    fn two_by_two_to_one_is_the_center_average() {
        let mut img = RgbImage::new(2, 2);
        img.set(0, 0, [1.0, 0.0, 0.0]);
        img.set(1, 0, [2.0, 0.0, 0.0]);
        img.set(0, 1, [3.0, 0.0, 0.0]);
        img.set(1, 1, [4.0, 0.0, 0.0]);
        let out = resample_window(&img, 0, 0, 2, 1);
        assert_eq!(out.get(0, 0)[0], 2.5);
    }

    #[test]
    fn crop_resize_is_reproducible() {
        let mut img = RgbImage::new(9, 7);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i % 11) as f32 / 11.0;
        }
        let p = processed(img);
        let a = crop_resize(&p, 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = crop_resize(&p, 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }
}
