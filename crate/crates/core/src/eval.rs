//! Angular-error statistics and the multi-draw K-shot evaluation protocol.

use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::colorsci::angular_error_raw;
use crate::dataio::ProcessedImage;
use crate::error::{Error, Result};
use crate::meta::{batch_from, predict_with};
use crate::nn::{backward, Checkpoint, Shape};
use crate::seed::derive_seed;
use crate::tasks::{sample_episode_excluding, TaskSpec};

/// Summary of a list of angular errors, all in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngularErrorStats {
    pub mean: f64,
    pub median: f64,
    pub trimean: f64,
    /// Mean of the lowest ⌈N/4⌉ errors.
    pub best25: f64,
    /// Mean of the highest ⌈N/4⌉ errors.
    pub worst25: f64,
    /// Geometric mean of the five statistics above.
    pub gm: f64,
}

impl AngularErrorStats {
    pub fn as_array(&self) -> [f64; 6] {
        [self.mean, self.median, self.trimean, self.best25, self.worst25, self.gm]
    }

    fn from_five(v: [f64; 5]) -> Self {
        let gm = v.iter().map(|x| x.ln()).sum::<f64>() / 5.0;
        Self {
            mean: v[0],
            median: v[1],
            trimean: v[2],
            best25: v[3],
            worst25: v[4],
            gm: gm.exp(),
        }
    }
}

/// Linearly interpolated quantile of sorted data (the R / NumPy default).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn stats(errors: &[f64]) -> Result<AngularErrorStats> {
    if errors.is_empty() {
        return Err(Error::invalid("no errors to summarise"));
    }
    if let Some(bad) = errors.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
        return Err(Error::invalid(format!("angular errors must be finite and >= 0, got {bad}")));
    }
    let mut s = errors.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let q = n.div_ceil(4);
    let mean = s.iter().sum::<f64>() / n as f64;
    let median = quantile(&s, 0.5);
    let trimean = (quantile(&s, 0.25) + 2.0 * median + quantile(&s, 0.75)) / 4.0;
    let best25 = s[..q].iter().sum::<f64>() / q as f64;
    let worst25 = s[n - q..].iter().sum::<f64>() / q as f64;
    Ok(AngularErrorStats::from_five([mean, median, trimean, best25, worst25]))
}

/// Geometric mean of each statistic across cameras (the "G.M. over
/// cameras" aggregation, distinct from [`AngularErrorStats::gm`]).
pub fn cross_camera_gm(per_camera: &[AngularErrorStats]) -> Result<AngularErrorStats> {
    if per_camera.is_empty() {
        return Err(Error::invalid("no cameras to aggregate"));
    }
    let n = per_camera.len() as f64;
    let mut out = [0.0; 6];
    for (k, o) in out.iter_mut().enumerate() {
        *o = (per_camera.iter().map(|s| s.as_array()[k].ln()).sum::<f64>() / n).exp();
    }
    Ok(AngularErrorStats {
        mean: out[0],
        median: out[1],
        trimean: out[2],
        best25: out[3],
        worst25: out[4],
        gm: out[5],
    })
}

/// Evaluation protocol parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k_test: usize,
    pub n_test: usize,
    pub draws: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_test: 10,
            n_test: 10,
            draws: 10,
            seed: 1,
        }
    }
}

/// Errors of one (checkpoint, camera, K_test, n_test) configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawReport {
    pub camera_id: String,
    pub variant: String,
    pub k_test: usize,
    pub n_test: usize,
    pub image_ids: Vec<usize>,
    /// `draws × images`, degrees.
    pub errors: Vec<Vec<f64>>,
    pub draw_medians: Vec<f64>,
    /// Mean over draws of the per-draw median.
    pub headline: f64,
    /// Sample standard deviation of the per-draw medians (0 for one draw).
    pub headline_std: f64,
    /// Median over images of the draw-averaged error (the other reading
    /// of "median over all images, averaged over all draws").
    pub median_of_draw_means: f64,
    /// Statistics of the draw-averaged per-image errors.
    pub stats: AngularErrorStats,
}

impl DrawReport {
    fn build(camera_id: &str, variant: &str, k_test: usize, n_test: usize, image_ids: Vec<usize>, errors: Vec<Vec<f64>>) -> Result<Self> {
        let draw_medians: Vec<f64> = errors.iter().map(|d| stats(d).map(|s| s.median)).collect::<Result<_>>()?;
        let nd = draw_medians.len() as f64;
        let headline = draw_medians.iter().sum::<f64>() / nd;
        let headline_std = if draw_medians.len() > 1 {
            (draw_medians.iter().map(|m| (m - headline).powi(2)).sum::<f64>() / (nd - 1.0)).sqrt()
        } else {
            0.0
        };
        let per_image: Vec<f64> = (0..image_ids.len())
            .map(|i| errors.iter().map(|d| d[i]).sum::<f64>() / nd)
            .collect();
        let st = stats(&per_image)?;
        Ok(Self {
            camera_id: camera_id.into(),
            variant: variant.into(),
            k_test,
            n_test,
            image_ids,
            errors,
            draw_medians,
            headline,
            headline_std,
            median_of_draw_means: st.median,
            stats: st,
        })
    }
}

fn task_of<'a>(tasks: &'a [&'a TaskSpec], id: usize) -> Option<&'a TaskSpec> {
    tasks.iter().copied().find(|t| t.contains(id))
}

/// Predictions for `targets` after 0, 1, ..., `n_test` inner steps on `support`.
pub fn adaptation_curve(checkpoint: &Checkpoint, support: &[&ProcessedImage], targets: &[&ProcessedImage], n_test: usize) -> Result<Vec<Vec<[f64; 3]>>> {
    let spec = &checkpoint.spec;
    let Shape::Spatial { h: size, .. } = spec.input() else {
        unreachable!("specs start spatial")
    };
    let mut theta = checkpoint.theta.clone();
    let mut out = Vec::with_capacity(n_test + 1);
    out.push(predict_with(spec, &theta, targets)?);
    if n_test == 0 {
        return Ok(out);
    }
    if let Some(other) = support.iter().find(|i| i.camera_id != support[0].camera_id) {
        return Err(Error::invalid(format!("support mixes cameras {} and {}", support[0].camera_id, other.camera_id)));
    }
    let b = batch_from(spec, support.iter().copied(), |im| crate::dataio::center_resize(im, size))?;
    for step in 0..n_test {
        let tape = backward(spec, &theta, &b.x, &b.gts)?;
        let a: Vec<f32> = checkpoint.alpha.expand(spec, step);
        for ((t, r), g) in theta.iter_mut().zip(&a).zip(&tape.grad) {
            *t -= r * g;
        }
        out.push(predict_with(spec, &theta, targets)?);
    }
    Ok(out)
}

/// Runs the protocol on every image of `camera` that belongs to one of its
/// tasks and returns one report per adaptation depth `0..=n_test`.
///
/// Each draw and test image gets `k_test` support images sampled from the
/// image's task without the image itself.
pub fn evaluate_curve(checkpoint: &Checkpoint, images: &[ProcessedImage], tasks: &[TaskSpec], camera: &str, cfg: &EvalConfig) -> Result<Vec<DrawReport>> {
    if cfg.draws == 0 {
        return Err(Error::invalid("draws must be positive"));
    }
    if cfg.n_test > 0 && cfg.k_test == 0 {
        return Err(Error::invalid("k_test must be positive when adapting"));
    }
    let cam_tasks: Vec<&TaskSpec> = tasks.iter().filter(|t| t.camera_id == camera).collect();
    let mut ids: Vec<usize> = cam_tasks.iter().flat_map(|t| t.members.iter().copied()).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return Err(Error::Insufficient(format!("camera {camera} has no task members to evaluate")));
    }
    for &id in &ids {
        let img = images.get(id).filter(|i| i.id == id).ok_or_else(|| Error::invalid(format!("image {id} missing from the image list")))?;
        if img.camera_id != camera {
            return Err(Error::invalid(format!("task of camera {camera} lists image {id} of camera {}", img.camera_id)));
        }
        let t = task_of(&cam_tasks, id).expect("member of a listed task");
        if t.len() - 1 < cfg.k_test {
            return Err(Error::Insufficient(format!(
                "task of image {id} has {} other members, k_test = {}",
                t.len() - 1,
                cfg.k_test
            )));
        }
    }
    // per (draw, image): errors at every depth
    let jobs: Vec<(usize, usize)> = (0..cfg.draws).flat_map(|d| ids.iter().map(move |&id| (d, id))).collect();
    let curves: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(d, id)| {
            let img = &images[id];
            let support: Vec<&ProcessedImage> = if cfg.n_test == 0 {
                Vec::new()
            } else {
                let task = task_of(&cam_tasks, id).expect("checked above");
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["draw", &d.to_string(), "image", &id.to_string()]));
                let ep = sample_episode_excluding(task, cfg.k_test, 0, Some(id), &mut rng)?;
                debug_assert!(!ep.support.contains(&id));
                ep.support.iter().map(|&s| &images[s]).collect()
            };
            let preds = adaptation_curve(checkpoint, &support, &[img], cfg.n_test)?;
            preds
                .iter()
                .map(|p| angular_error_raw(&p[0], &img.gt.to_array()).or(Ok(90.0)))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    (0..=cfg.n_test)
        .map(|n| {
            let errors: Vec<Vec<f64>> = (0..cfg.draws)
                .map(|d| (0..ids.len()).map(|i| curves[d * ids.len() + i][n]).collect())
                .collect();
            DrawReport::build(camera, &checkpoint.variant, cfg.k_test, n, ids.clone(), errors)
        })
        .collect()
}

/// As [`evaluate_curve`], keeping only the `n_test` report.
pub fn evaluate(checkpoint: &Checkpoint, images: &[ProcessedImage], tasks: &[TaskSpec], camera: &str, cfg: &EvalConfig) -> Result<DrawReport> {
    Ok(evaluate_curve(checkpoint, images, tasks, camera, cfg)?.pop().expect("n_test + 1 reports"))
}

pub const REPORT_COLUMNS: [&str; 12] = [
    "camera",
    "variant",
    "K_test",
    "n_test",
    "mean",
    "median",
    "trimean",
    "best25",
    "worst25",
    "gm",
    "headline_median_over_draws",
    "headline_std_over_draws",
];

/// Comment line written above the report header.
pub const REPORT_NOTE: &str = "# headline_median_over_draws: per-draw median over images, then mean over draws; \
mean..gm: statistics of per-image errors averaged over draws (the other reading); \
headline_std_over_draws: sample standard deviation of the per-draw medians; all values in degrees";

pub fn write_report(path: &Path, reports: &[DrawReport]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{REPORT_NOTE}").expect("write to Vec");
    writeln!(out, "{}", REPORT_COLUMNS.join(",")).expect("write to Vec");
    for r in reports {
        let s = &r.stats;
        writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.camera_id, r.variant, r.k_test, r.n_test, s.mean, s.median, s.trimean, s.best25, s.worst25, s.gm, r.headline, r.headline_std
        )
        .expect("write to Vec");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn five_values() {
        let s = stats(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!((s.mean, s.median, s.trimean, s.best25, s.worst25), (3.0, 3.0, 3.0, 1.5, 4.5));
        assert!((s.gm - 2.832262533884706).abs() < 1e-12);
    }

    #[test]
    fn quartiles_interpolate() {
        let s = stats(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        // Q1 = 1.75, Q2 = 2.5, Q3 = 3.25
        assert!((s.trimean - 2.5).abs() < 1e-15);
        assert_eq!((s.best25, s.worst25), (1.0, 4.0));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(stats(&[]).is_err());
        assert!(stats(&[1.0, -0.5]).is_err());
        assert!(stats(&[f64::NAN]).is_err());
    }

    #[test]
    fn cross_camera_aggregate() {
        let a = stats(&[1.0, 2.0, 3.0]).unwrap();
        let b = stats(&[4.0, 8.0, 12.0]).unwrap();
        let g = cross_camera_gm(&[a, b]).unwrap();
        assert!((g.mean - (2.0f64 * 8.0).sqrt()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn order_and_scale(mut v in prop::collection::vec(0.01f64..40.0, 1..60), s in 0.1f64..10.0) {
            let a = stats(&v).unwrap();
            v.reverse();
            prop_assert_eq!(a, stats(&v).unwrap());
            let scaled: Vec<f64> = v.iter().map(|x| x * s).collect();
            let b = stats(&scaled).unwrap();
            for (x, y) in a.as_array().iter().zip(b.as_array()) {
                prop_assert!((x * s - y).abs() <= 1e-9 * y.max(1.0));
            }
            prop_assert!(a.best25 <= a.median && a.median <= a.worst25);
        }

        #[test]
        fn constant_lists(c in 0.01f64..30.0, n in 1usize..20) {
            let s = stats(&vec![c; n]).unwrap();
            for v in s.as_array() {
                prop_assert!((v - c).abs() <= 1e-12 * c);
            }
        }
    }
}
