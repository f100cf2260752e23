//! Camera × color-temperature tasks.
//!
//! Each camera's images are binned by correlated color temperature on a
//! logarithmic scale; one task is the set of images of one camera that fall
//! in one bin, both bin edges inclusive. The KNN variant instead takes the
//! K images nearest to an anchor temperature. Images are referred to by
//! their manifest id, which is also their index in the image slice.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::colorsci::{angular_error, cct_from_xy, rgb_to_xy, IlluminantRgb, Kelvin};
use crate::dataio::{gamma_decode, ProcessedImage};
use crate::error::{Error, Result};

/// Temperature estimated from the image itself: the mean linear RGB over
/// valid pixels, mapped through xy to the CCT fit.
pub fn image_cct(img: &ProcessedImage) -> Result<Kelvin> {
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for (px, &ok) in img.image.pixels().zip(&img.valid) {
        if ok {
            for k in 0..3 {
                sum[k] += gamma_decode(px[k]) as f64;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Insufficient(format!("image {} has no valid pixels", img.id)));
    }
    let mean = IlluminantRgb::new(sum[0] / n as f64, sum[1] / n as f64, sum[2] / n as f64)
        .map_err(|_| Error::invalid(format!("image {} is black", img.id)))?;
    cct_from_xy(&rgb_to_xy(&mean)?)
}

/// Fills `cct` on every image where it is computable, in parallel. Returns
/// the ids of images whose temperature could not be computed.
pub fn compute_ccts(images: &mut [ProcessedImage]) -> Vec<usize> {
    use rayon::prelude::*;
    images.par_iter_mut().for_each(|img| img.cct = image_cct(img).ok());
    let failed: Vec<usize> = images.iter().filter(|i| i.cct.is_none()).map(|i| i.id).collect();
    for id in &failed {
        log::warn!("image {id}: no computable color temperature, excluded from tasks");
    }
    failed
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CctHistogram {
    pub camera_id: String,
    /// `m + 1` ascending edges in Kelvin.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Set when every image had the same temperature and a single bin was
    /// used in place of the requested count.
    pub degenerate: bool,
}

impl CctHistogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    /// Bin index of `t`; edges are inclusive and a shared interior edge
    /// belongs to the lower bin.
    pub fn bin_of(&self, t: f64) -> Option<usize> {
        let m = self.bins();
        if !(t >= self.edges[0] && t <= self.edges[m]) {
            return None;
        }
        (0..m).find(|&i| t <= self.edges[i + 1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramOptions {
    pub bins: usize,
    /// Use one set of edges spanning every camera instead of per-camera edges.
    pub global_edges: bool,
    /// Fall back to a single bin when a camera's temperatures are all equal.
    pub single_bin_fallback: bool,
}

impl Default for HistogramOptions {
    fn default() -> Self {
        Self {
            bins: 2,
            global_edges: false,
            single_bin_fallback: true,
        }
    }
}

/// `m` log-uniform bins over `[lo, hi]`, the top edge nudged up one ulp.
pub fn log_edges(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    let (a, b) = (lo.log10(), hi.log10());
    let mut edges: Vec<f64> = (0..=m).map(|i| 10f64.powf(a + (b - a) * i as f64 / m as f64)).collect();
    edges[0] = lo;
    edges[m] = hi.next_up();
    edges
}

pub fn build_histogram(camera_id: &str, ccts: &[f64], opts: &HistogramOptions) -> Result<CctHistogram> {
    let range = ccts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &t| (lo.min(t), hi.max(t)));
    histogram_with_range(camera_id, ccts, range, opts)
}

fn histogram_with_range(camera_id: &str, ccts: &[f64], (lo, hi): (f64, f64), opts: &HistogramOptions) -> Result<CctHistogram> {
    if opts.bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    if ccts.len() < opts.bins {
        return Err(Error::Insufficient(format!(
            "camera {camera_id}: {} images with a computable temperature, {} bins requested",
            ccts.len(),
            opts.bins
        )));
    }
    let (edges, degenerate) = if lo == hi {
        if opts.bins > 1 && !opts.single_bin_fallback {
            return Err(Error::Insufficient(format!(
                "camera {camera_id}: every image is at {lo} K, cannot form {} bins",
                opts.bins
            )));
        }
        (vec![lo, hi.next_up()], opts.bins > 1)
    } else {
        (log_edges(lo, hi, opts.bins), false)
    };
    let mut hist = CctHistogram {
        camera_id: camera_id.to_owned(),
        counts: vec![0; edges.len() - 1],
        edges,
        degenerate,
    };
    for &t in ccts {
        let b = hist.bin_of(t).expect("range covers every temperature");
        hist.counts[b] += 1;
    }
    Ok(hist)
}

/// Camera ids in first-appearance order, with their images' ids.
pub fn images_by_camera(images: &[ProcessedImage]) -> Vec<(String, Vec<usize>)> {
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    for img in images {
        match out.iter_mut().find(|(c, _)| *c == img.camera_id) {
            Some((_, ids)) => ids.push(img.id),
            None => out.push((img.camera_id.clone(), vec![img.id])),
        }
    }
    out
}

fn check_ids(images: &[ProcessedImage]) -> Result<()> {
    match images.iter().enumerate().find(|(i, img)| img.id != *i) {
        Some((i, img)) => Err(Error::invalid(format!("image at position {i} has id {}", img.id))),
        None => Ok(()),
    }
}

/// One histogram per camera, from images whose `cct` is set.
pub fn build_histograms(images: &[ProcessedImage], opts: &HistogramOptions) -> Result<Vec<CctHistogram>> {
    let by_cam = images_by_camera(images);
    let temps = |ids: &[usize]| -> Vec<f64> { ids.iter().filter_map(|&i| images[i].cct.map(|k| k.value())).collect() };
    check_ids(images)?;
    let global = if opts.global_edges {
        let all: Vec<f64> = images.iter().filter_map(|i| i.cct.map(|k| k.value())).collect();
        Some(all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &t| (lo.min(t), hi.max(t))))
    } else {
        None
    };
    by_cam
        .iter()
        .map(|(cam, ids)| {
            let t = temps(ids);
            match global {
                Some(range) => histogram_with_range(cam, &t, range, opts),
                None => build_histogram(cam, &t, opts),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKey {
    Bin { index: usize, lo: f64, hi: f64 },
    Knn { anchor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub camera_id: String,
    pub key: TaskKey,
    /// Image ids in ascending order.
    pub members: Vec<usize>,
}

impl TaskSpec {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.members.binary_search(&id).is_ok()
    }
}

/// Default minimum task population: one support plus one query set.
pub const DEFAULT_MIN_TASK_SIZE: usize = 20;

/// One task per (camera, bin) holding at least `min_task_size` images.
pub fn assign_tasks(images: &[ProcessedImage], histograms: &[CctHistogram], min_task_size: usize) -> Result<Vec<TaskSpec>> {
    check_ids(images)?;
    let mut members: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for img in images {
        let Some(t) = img.cct else { continue };
        let (hi, hist) = histograms
            .iter()
            .enumerate()
            .find(|(_, h)| h.camera_id == img.camera_id)
            .ok_or_else(|| Error::invalid(format!("no histogram for camera {}", img.camera_id)))?;
        let b = hist.bin_of(t.value()).ok_or_else(|| {
            Error::invalid(format!("image {} at {t} lies outside camera {}'s histogram", img.id, img.camera_id))
        })?;
        members.entry((hi, b)).or_default().push(img.id);
    }
    let mut tasks = Vec::new();
    for ((hi, b), ids) in members {
        let hist = &histograms[hi];
        if ids.len() < min_task_size {
            log::warn!(
                "camera {} bin {b} [{:.0}, {:.0}] K has {} images (< {min_task_size}); task dropped",
                hist.camera_id,
                hist.edges[b],
                hist.edges[b + 1],
                ids.len()
            );
            continue;
        }
        tasks.push(TaskSpec {
            camera_id: hist.camera_id.clone(),
            key: TaskKey::Bin {
                index: b,
                lo: hist.edges[b],
                hi: hist.edges[b + 1],
            },
            members: ids,
        });
    }
    Ok(tasks)
}

/// The `k` images of `camera` nearest to `anchor` in temperature, ties by id.
pub fn knn_task(images: &[ProcessedImage], camera: &str, anchor: f64, k: usize) -> Result<TaskSpec> {
    let mut cands: Vec<(f64, usize)> = images
        .iter()
        .filter(|i| i.camera_id == camera)
        .filter_map(|i| i.cct.map(|t| ((t.value() - anchor).abs(), i.id)))
        .collect();
    if k == 0 || cands.len() < k {
        return Err(Error::Insufficient(format!(
            "camera {camera} has {} images with a temperature, {k} neighbours requested",
            cands.len()
        )));
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut members: Vec<usize> = cands[..k].iter().map(|c| c.1).collect();
    members.sort_unstable();
    Ok(TaskSpec {
        camera_id: camera.to_owned(),
        key: TaskKey::Knn { anchor },
        members,
    })
}

/// Disjoint support and query image ids drawn from one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

/// Uniform draw of `k + q` distinct members, the first `k` forming the
/// support set.
pub fn sample_episode<R: Rng + ?Sized>(task: &TaskSpec, k: usize, q: usize, rng: &mut R) -> Result<Episode> {
    sample_episode_excluding(task, k, q, None, rng)
}

/// As [`sample_episode`] with one member withheld from both sets.
pub fn sample_episode_excluding<R: Rng + ?Sized>(
    task: &TaskSpec,
    k: usize,
    q: usize,
    exclude: Option<usize>,
    rng: &mut R,
) -> Result<Episode> {
    let pool: Vec<usize> = task.members.iter().copied().filter(|&m| Some(m) != exclude).collect();
    if pool.len() < k + q {
        return Err(Error::Insufficient(format!(
            "task on camera {} has {} available members, episode needs {}",
            task.camera_id,
            pool.len(),
            k + q
        )));
    }
    let picked = sample(rng, pool.len(), k + q);
    let ids: Vec<usize> = picked.iter().map(|i| pool[i]).collect();
    Ok(Episode {
        support: ids[..k].to_vec(),
        query: ids[k..].to_vec(),
    })
}

/// Mean pairwise angular error between the ground truths of `ids`.
pub fn gt_spread(images: &[ProcessedImage], ids: &[usize]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (a, &i) in ids.iter().enumerate() {
        for &j in &ids[a + 1..] {
            sum += angular_error(&images[i].gt, &images[j].gt);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Writes one JSON object per line.
pub fn write_tasks_jsonl(path: &Path, tasks: &[TaskSpec]) -> Result<()> {
    let mut out = Vec::new();
    for t in tasks {
        serde_json::to_writer(&mut out, t).map_err(|e| Error::format(path, e.to_string()))?;
        out.write_all(b"\n").expect("write to Vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_tasks_jsonl(path: &Path) -> Result<Vec<TaskSpec>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}
