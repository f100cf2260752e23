//! Meta-training (MAML, metaSGD, LSLR), the pooled joint-training baseline,
//! and test-time K-shot adaptation.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{center_resize, crop_resize, ProcessedImage};
use crate::error::{Error, Result};
use crate::nn::{
    backward, forward, init_params, inner_adapt, meta_backward, step_rates, AlphaState, Batch, Checkpoint, MetaGradMode, NetworkSpec,
};
use crate::seed::derive_seed;
use crate::tasks::{knn_task, sample_episode, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Fixed scalar inner rate.
    Maml,
    /// Learned rate per parameter.
    MetaSgd,
    /// Learned rate per layer and inner step.
    Lslr,
    /// Joint training on pooled batches, no inner loop.
    Baseline,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Maml => "maml",
            Variant::MetaSgd => "metasgd",
            Variant::Lslr => "lslr",
            Variant::Baseline => "baseline",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maml" => Ok(Variant::Maml),
            "metasgd" => Ok(Variant::MetaSgd),
            "lslr" => Ok(Variant::Lslr),
            "baseline" => Ok(Variant::Baseline),
            _ => Err(Error::invalid(format!("unknown variant {s:?} (maml, metasgd, lslr, baseline)"))),
        }
    }
}

/// Network architecture by name (`desk`, `full`) or in the text form of
/// [`NetworkSpec`] without the input prefix, e.g. `conv8,ln,relu,avgpool,dense3`.
pub fn resolve_spec(name: &str, input_size: usize) -> Result<NetworkSpec> {
    match name {
        "desk" => Ok(NetworkSpec::desk(input_size)),
        "full" => Ok(NetworkSpec::full(input_size)),
        layers => format!("{input_size}x{input_size}x3:{layers}").parse(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub meta_batch_size: usize,
    pub k_train: usize,
    pub q_train: usize,
    pub n_train: usize,
    /// Outer learning rate.
    pub beta: f64,
    /// β is multiplied by this every `beta_decay_interval` iterations.
    pub beta_decay_rate: f64,
    /// 0 selects `iterations / 25`.
    pub beta_decay_interval: usize,
    /// Initial inner rate, and the fine-tuning rate of the baseline.
    pub alpha_init: f64,
    pub iterations: usize,
    pub meta_grad: MetaGradMode,
    pub seed: u64,
    pub input_size: usize,
    pub spec: String,
    pub held_out_camera: Option<String>,
    /// Train on temperature-neighbourhood tasks of this size instead of
    /// histogram bins; the anchor is a random member image's temperature.
    pub knn_train: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Lslr,
            meta_batch_size: 10,
            k_train: 10,
            q_train: 10,
            n_train: 5,
            beta: 0.001,
            beta_decay_rate: 0.96,
            beta_decay_interval: 0,
            alpha_init: 0.001,
            iterations: 2000,
            meta_grad: MetaGradMode::Exact,
            seed: 1,
            input_size: 16,
            spec: "desk".into(),
            held_out_camera: None,
            knn_train: None,
        }
    }
}

impl TrainConfig {
    pub fn network(&self) -> Result<NetworkSpec> {
        resolve_spec(&self.spec, self.input_size)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("meta_batch_size", self.meta_batch_size),
            ("k_train", self.k_train),
            ("q_train", self.q_train),
            ("input_size", self.input_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.variant != Variant::Baseline && self.n_train == 0 {
            return Err(Error::invalid("n_train must be positive for meta-learning variants"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta {} must be finite and >= 0", self.beta)));
        }
        if !(self.beta_decay_rate > 0.0 && self.beta_decay_rate <= 1.0) {
            return Err(Error::invalid(format!("beta_decay_rate {} outside (0, 1]", self.beta_decay_rate)));
        }
        if !self.alpha_init.is_finite() {
            return Err(Error::invalid("alpha_init must be finite"));
        }
        if let Some(k) = self.knn_train {
            if k < self.k_train + self.q_train {
                return Err(Error::invalid(format!(
                    "knn_train {k} is smaller than k_train + q_train = {}",
                    self.k_train + self.q_train
                )));
            }
        }
        self.network().map(|_| ())
    }

    /// β in force during iteration `t` (0-based).
    pub fn beta_at(&self, t: usize) -> f64 {
        let interval = if self.beta_decay_interval == 0 {
            (self.iterations / 25).max(1)
        } else {
            self.beta_decay_interval
        };
        self.beta * self.beta_decay_rate.powi((t / interval) as i32)
    }

    pub fn initial_alpha(&self, spec: &NetworkSpec) -> AlphaState {
        let a = self.alpha_init as f32;
        match self.variant {
            Variant::Maml | Variant::Baseline => AlphaState::Scalar(a),
            Variant::MetaSgd => AlphaState::per_parameter(spec, a),
            Variant::Lslr => AlphaState::per_layer_per_step(spec, self.n_train, a),
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    /// 1-based.
    pub iteration: usize,
    pub beta: f64,
    pub mean_outer_loss_degrees: f64,
}

/// Images drawn at one training iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub iteration: usize,
    pub camera_id: String,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    pub episodes: Vec<EpisodeRecord>,
}

pub const LOG_HEADER: &str = "iteration,beta,mean_outer_loss_degrees";

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{LOG_HEADER}").expect("write to Vec");
    for r in rows {
        writeln!(out, "{},{},{}", r.iteration, r.beta, r.mean_outer_loss_degrees).expect("write to Vec");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Network input for a batch of images, N×S×S×3.
pub fn batch_from<'a, I, F>(spec: &NetworkSpec, images: I, mut prepare: F) -> Result<Batch<f32>>
where
    I: IntoIterator<Item = &'a ProcessedImage>,
    F: FnMut(&ProcessedImage) -> Result<crate::image::RgbImage>,
{
    let mut x = Vec::new();
    let mut gts = Vec::new();
    for img in images {
        x.extend_from_slice(prepare(img)?.data());
        gts.push(img.gt.to_array());
    }
    Batch::new(spec, x, gts)
}

fn lookup<'a>(images: &'a [ProcessedImage], id: usize) -> Result<&'a ProcessedImage> {
    images
        .get(id)
        .filter(|img| img.id == id)
        .ok_or_else(|| Error::invalid(format!("image id {id} does not match its position in the image list")))
}

fn training_cameras(images: &[ProcessedImage], held_out: Option<&str>) -> Result<Vec<String>> {
    let all: BTreeSet<&str> = images.iter().map(|i| i.camera_id.as_str()).collect();
    if let Some(h) = held_out {
        if !all.contains(h) {
            return Err(Error::invalid(format!("held-out camera {h} has no images")));
        }
    }
    let cams: Vec<String> = all.into_iter().filter(|&c| Some(c) != held_out).map(String::from).collect();
    if cams.len() < 2 {
        return Err(Error::Insufficient(format!("{} training camera(s), at least 2 needed", cams.len())));
    }
    Ok(cams)
}

fn echo(config: &TrainConfig) -> String {
    serde_json::to_string(config).expect("config serializes")
}

enum TaskSource<'a> {
    Fixed(Vec<&'a TaskSpec>),
    Knn { cameras: Vec<String>, k: usize },
}

impl TaskSource<'_> {
    fn draw<R: Rng>(&self, images: &[ProcessedImage], rng: &mut R) -> Result<TaskSpec> {
        match self {
            TaskSource::Fixed(tasks) => Ok((*tasks.choose(rng).expect("nonempty task list")).clone()),
            TaskSource::Knn { cameras, k } => {
                let cam = cameras.choose(rng).expect("cameras");
                let members: Vec<&ProcessedImage> = images.iter().filter(|i| &i.camera_id == cam && i.cct.is_some()).collect();
                let anchor = members
                    .choose(rng)
                    .and_then(|i| i.cct)
                    .ok_or_else(|| Error::Insufficient(format!("camera {cam} has no image temperatures")))?;
                knn_task(images, cam, anchor.value(), *k)
            }
        }
    }
}

/// Meta-trains the configured variant on every camera except the held-out one.
pub fn meta_train(config: &TrainConfig, images: &[ProcessedImage], tasks: &[TaskSpec]) -> Result<TrainOutput> {
    config.validate()?;
    if config.variant == Variant::Baseline {
        return train_baseline(config, images);
    }
    let spec = config.network()?;
    let held_out = config.held_out_camera.as_deref();
    let cameras = training_cameras(images, held_out)?;
    let need = config.k_train + config.q_train;
    let source = match config.knn_train {
        Some(k) => TaskSource::Knn { cameras: cameras.clone(), k },
        None => {
            let usable: Vec<&TaskSpec> = tasks.iter().filter(|t| Some(t.camera_id.as_str()) != held_out && t.len() >= need).collect();
            if usable.is_empty() {
                return Err(Error::Insufficient(format!("no training task holds {need} images")));
            }
            TaskSource::Fixed(usable)
        }
    };
    for img in images {
        lookup(images, img.id)?;
    }

    let mut theta = init_params(&spec, derive_seed(config.seed, &["init"])).theta;
    let mut alpha = config.initial_alpha(&spec);
    let learn_alpha = alpha.is_learned() && config.meta_grad == MetaGradMode::Exact;
    if alpha.is_learned() && !learn_alpha {
        log::warn!("{} learns its inner rates but the meta-gradient is first-order; rates stay at {}", config.variant, config.alpha_init);
    }
    let mut log_rows = Vec::with_capacity(config.iterations);
    let mut episodes = Vec::with_capacity(config.iterations * config.meta_batch_size);
    for it in 0..config.iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &["iter", &it.to_string()]));
        let mut jobs = Vec::with_capacity(config.meta_batch_size);
        for j in 0..config.meta_batch_size {
            let task = source.draw(images, &mut rng)?;
            let ep = sample_episode(&task, config.k_train, config.q_train, &mut rng)?;
            let crop_seed = derive_seed(config.seed, &["crop", &it.to_string(), &j.to_string()]);
            episodes.push(EpisodeRecord {
                iteration: it + 1,
                camera_id: task.camera_id.clone(),
                support: ep.support.clone(),
                query: ep.query.clone(),
            });
            jobs.push((ep, crop_seed));
        }
        let results: Vec<_> = jobs
            .par_iter()
            .map(|(ep, crop_seed)| {
                let mut crng = ChaCha8Rng::seed_from_u64(*crop_seed);
                let s = batch_from(&spec, ep.support.iter().map(|&i| &images[i]), |im| crop_resize(im, config.input_size, &mut crng))?;
                let q = batch_from(&spec, ep.query.iter().map(|&i| &images[i]), |im| crop_resize(im, config.input_size, &mut crng))?;
                meta_backward(&spec, &theta, &alpha, &s, &q, config.n_train, config.meta_grad)
            })
            .collect::<Result<_>>()?;
        let beta = config.beta_at(it);
        let m = results.len() as f64;
        let mut gt = vec![0.0f64; theta.len()];
        let mut ga = vec![0.0f64; alpha.values().len()];
        let mut loss = 0.0;
        for r in &results {
            for (a, b) in gt.iter_mut().zip(&r.theta) {
                *a += b;
            }
            for (a, b) in ga.iter_mut().zip(&r.alpha) {
                *a += b;
            }
            loss += r.loss;
        }
        for (t, g) in theta.iter_mut().zip(&gt) {
            *t = (*t as f64 - beta * g / m) as f32;
        }
        if learn_alpha {
            for (a, g) in alpha.values_mut().iter_mut().zip(&ga) {
                *a = (*a as f64 - beta * g / m) as f32;
            }
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("parameters diverged at iteration {}", it + 1)));
        }
        log_rows.push(LogRow {
            iteration: it + 1,
            beta,
            mean_outer_loss_degrees: (loss / m).to_degrees(),
        });
    }
    Ok(TrainOutput {
        checkpoint: Checkpoint {
            variant: config.variant.name().into(),
            spec,
            theta,
            alpha,
            config: echo(config),
            iterations: config.iterations as u64,
            seed: config.seed,
        },
        log: log_rows,
        episodes,
    })
}

/// Plain SGD on batches drawn uniformly from the pooled training cameras,
/// `meta_batch_size × (k_train + q_train)` images per iteration.
pub fn train_baseline(config: &TrainConfig, images: &[ProcessedImage]) -> Result<TrainOutput> {
    config.validate()?;
    let spec = config.network()?;
    let held_out = config.held_out_camera.as_deref();
    training_cameras(images, held_out)?;
    let pool: Vec<usize> = images.iter().filter(|i| Some(i.camera_id.as_str()) != held_out).map(|i| i.id).collect();
    for &id in &pool {
        lookup(images, id)?;
    }
    let batch_size = config.meta_batch_size * (config.k_train + config.q_train);
    let mut theta = init_params(&spec, derive_seed(config.seed, &["init"])).theta;
    let mut log_rows = Vec::with_capacity(config.iterations);
    let mut episodes = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &["iter", &it.to_string()]));
        let ids: Vec<usize> = (0..batch_size).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
        let b = batch_from(&spec, ids.iter().map(|&i| &images[i]), |im| crop_resize(im, config.input_size, &mut rng))?;
        let tape = backward(&spec, &theta, &b.x, &b.gts)?;
        let beta = config.beta_at(it);
        for (t, g) in theta.iter_mut().zip(&tape.grad) {
            *t = (*t as f64 - beta * *g as f64) as f32;
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("parameters diverged at iteration {}", it + 1)));
        }
        log_rows.push(LogRow {
            iteration: it + 1,
            beta,
            mean_outer_loss_degrees: tape.loss.to_degrees(),
        });
        episodes.push(EpisodeRecord {
            iteration: it + 1,
            camera_id: String::new(),
            support: ids,
            query: Vec::new(),
        });
    }
    Ok(TrainOutput {
        checkpoint: Checkpoint {
            variant: Variant::Baseline.name().into(),
            spec: spec.clone(),
            theta,
            alpha: AlphaState::Scalar(config.alpha_init as f32),
            config: echo(config),
            iterations: config.iterations as u64,
            seed: config.seed,
        },
        log: log_rows,
        episodes,
    })
}

/// Parameters after test-time adaptation.
#[derive(Debug, Clone)]
pub struct Adapted {
    pub spec: NetworkSpec,
    pub theta: Vec<f32>,
    /// Per-layer rate used at each inner step.
    pub rates: Vec<Vec<f32>>,
    /// Support loss (degrees) before each step.
    pub support_losses: Vec<f64>,
}

impl Adapted {
    /// Illuminant estimates for `images` (centered, resized inputs).
    pub fn predict(&self, images: &[&ProcessedImage]) -> Result<Vec<[f64; 3]>> {
        predict_with(&self.spec, &self.theta, images)
    }
}

pub fn predict_with(spec: &NetworkSpec, theta: &[f32], images: &[&ProcessedImage]) -> Result<Vec<[f64; 3]>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let size = match spec.input() {
        crate::nn::Shape::Spatial { h, .. } => h,
        crate::nn::Shape::Flat(_) => unreachable!("specs start spatial"),
    };
    let b = batch_from(spec, images.iter().copied(), |im| center_resize(im, size))?;
    let out = forward(spec, theta, &b.x, images.len())?;
    Ok(out.chunks_exact(3).map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect())
}

/// `n_test` inner steps on a support set from one camera, with the
/// checkpoint's rates (the last learned step's rates repeat beyond `n_train`).
pub fn adapt(checkpoint: &Checkpoint, support: &[&ProcessedImage], n_test: usize) -> Result<Adapted> {
    let spec = &checkpoint.spec;
    if let Some(first) = support.first() {
        if let Some(other) = support.iter().find(|i| i.camera_id != first.camera_id) {
            return Err(Error::invalid(format!(
                "support mixes cameras {} and {}",
                first.camera_id, other.camera_id
            )));
        }
    } else if n_test > 0 {
        return Err(Error::invalid("empty support set"));
    }
    if n_test == 0 {
        return Ok(Adapted {
            spec: spec.clone(),
            theta: checkpoint.theta.clone(),
            rates: Vec::new(),
            support_losses: Vec::new(),
        });
    }
    let size = match spec.input() {
        crate::nn::Shape::Spatial { h, .. } => h,
        crate::nn::Shape::Flat(_) => unreachable!("specs start spatial"),
    };
    let b = batch_from(spec, support.iter().copied(), |im| center_resize(im, size))?;
    let trace = inner_adapt(spec, &checkpoint.theta, &checkpoint.alpha, &b, n_test)?;
    Ok(Adapted {
        spec: spec.clone(),
        theta: trace.theta,
        rates: step_rates(spec, &checkpoint.alpha, n_test),
        support_losses: trace.losses.iter().map(|l| l.to_degrees()).collect(),
    })
}
