//! Run configuration: every tunable of dataset generation, task building,
//! training and evaluation, as flat dotted `key = value` pairs.
//!
//! File format: one `key = value` per line, `#` starts a comment, blank
//! lines are ignored. Unknown keys are errors. Values are applied over the
//! defaults in file order, and command-line overrides are applied last.

use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::meta::TrainConfig;
use crate::synthcam::SynthConfig;
use crate::tasks::{HistogramOptions, DEFAULT_MIN_TASK_SIZE};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub histogram: HistogramOptions,
    pub min_task_size: usize,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            histogram: HistogramOptions::default(),
            min_task_size: DEFAULT_MIN_TASK_SIZE,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("synth.cameras", "number of synthetic cameras"),
    ("synth.scenes_per_camera", "scenes rendered per camera"),
    ("synth.image_size", "rendered image side in pixels"),
    ("synth.cct_groups", "illuminant temperature groups, lo-hi;lo-hi (Kelvin)"),
    ("synth.css_jitter", "sensor sensitivity jitter in [0, 0.3]"),
    ("synth.noise_sigma", "additive noise, fraction of full scale"),
    ("synth.patches", "reflectance patches per scene"),
    ("synth.chroma", "maximum reflectance bump amplitude"),
    ("synth.neutral_background", "grey scene background (true/false)"),
    ("synth.spd_jitter_fraction", "fraction of illuminants pushed off the locus"),
    ("synth.seed", "dataset seed"),
    ("tasks.bins", "temperature histogram bins per camera (M)"),
    ("tasks.global_edges", "share one temperature range across cameras"),
    ("tasks.single_bin_fallback", "one bin when all temperatures coincide"),
    ("tasks.min_task_size", "smallest task kept"),
    ("train.variant", "maml, metasgd, lslr or baseline"),
    ("train.meta_batch_size", "tasks per outer step"),
    ("train.k_train", "support images per episode"),
    ("train.q_train", "query images per episode"),
    ("train.n_train", "inner steps during training"),
    ("train.beta", "outer learning rate"),
    ("train.beta_decay_rate", "outer rate decay factor"),
    ("train.beta_decay_interval", "iterations between decays, 0 = iterations/25"),
    ("train.alpha_init", "initial inner rate (baseline: fine-tuning rate)"),
    ("train.iterations", "outer iterations"),
    ("train.meta_grad", "exact or first_order"),
    ("train.seed", "training seed"),
    ("train.input_size", "network input side in pixels"),
    ("train.spec", "desk, full, or a layer list such as conv8,ln,relu,avgpool,dense3"),
    ("train.held_out_camera", "camera excluded from training (empty = none)"),
    ("train.knn_train", "train on nearest-temperature tasks of this size (0 = bins)"),
    ("eval.k_test", "support images per test image"),
    ("eval.n_test", "fine-tuning steps at test time"),
    ("eval.draws", "independent support draws"),
    ("eval.seed", "evaluation seed"),
];

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::invalid(format!("invalid value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::invalid(format!("invalid value {v:?} for {key} (true/false)"))),
    }
}

fn parse_groups(key: &str, v: &str) -> Result<Vec<(f64, f64)>> {
    v.split(';')
        .filter(|g| !g.trim().is_empty())
        .map(|g| {
            let (lo, hi) = g.split_once('-').ok_or_else(|| Error::invalid(format!("invalid group {g:?} in {key}, expected lo-hi")))?;
            Ok((parse(key, lo.trim())?, parse(key, hi.trim())?))
        })
        .collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "synth.cameras" => self.synth.cameras = parse(key, v)?,
            "synth.scenes_per_camera" => self.synth.scenes_per_camera = parse(key, v)?,
            "synth.image_size" => self.synth.image_size = parse(key, v)?,
            "synth.cct_groups" => self.synth.cct_groups = parse_groups(key, v)?,
            "synth.css_jitter" => self.synth.css_jitter = parse(key, v)?,
            "synth.noise_sigma" => self.synth.noise_sigma = parse(key, v)?,
            "synth.patches" => self.synth.scene_style.patches = parse(key, v)?,
            "synth.chroma" => self.synth.scene_style.chroma = parse(key, v)?,
            "synth.neutral_background" => self.synth.scene_style.neutral_background = parse_bool(key, v)?,
            "synth.spd_jitter_fraction" => self.synth.spd_jitter_fraction = parse(key, v)?,
            "synth.seed" => self.synth.seed = parse(key, v)?,
            "tasks.bins" => self.histogram.bins = parse(key, v)?,
            "tasks.global_edges" => self.histogram.global_edges = parse_bool(key, v)?,
            "tasks.single_bin_fallback" => self.histogram.single_bin_fallback = parse_bool(key, v)?,
            "tasks.min_task_size" => self.min_task_size = parse(key, v)?,
            "train.variant" => self.train.variant = v.parse()?,
            "train.meta_batch_size" => self.train.meta_batch_size = parse(key, v)?,
            "train.k_train" => self.train.k_train = parse(key, v)?,
            "train.q_train" => self.train.q_train = parse(key, v)?,
            "train.n_train" => self.train.n_train = parse(key, v)?,
            "train.beta" => self.train.beta = parse(key, v)?,
            "train.beta_decay_rate" => self.train.beta_decay_rate = parse(key, v)?,
            "train.beta_decay_interval" => self.train.beta_decay_interval = parse(key, v)?,
            "train.alpha_init" => self.train.alpha_init = parse(key, v)?,
            "train.iterations" => self.train.iterations = parse(key, v)?,
            "train.meta_grad" => self.train.meta_grad = v.parse()?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.input_size" => self.train.input_size = parse(key, v)?,
            "train.spec" => self.train.spec = v.to_owned(),
            "train.held_out_camera" => self.train.held_out_camera = (!v.is_empty()).then(|| v.to_owned()),
            "train.knn_train" => {
                let k: usize = parse(key, v)?;
                self.train.knn_train = (k > 0).then_some(k);
            }
            "eval.k_test" => self.eval.k_test = parse(key, v)?,
            "eval.n_test" => self.eval.n_test = parse(key, v)?,
            "eval.draws" => self.eval.draws = parse(key, v)?,
            "eval.seed" => self.eval.seed = parse(key, v)?,
            _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Current value of `key` in the same text form [`Self::set`] accepts.
    pub fn get(&self, key: &str) -> Result<String> {
        let s = &self.synth;
        let t = &self.train;
        Ok(match key {
            "synth.cameras" => s.cameras.to_string(),
            "synth.scenes_per_camera" => s.scenes_per_camera.to_string(),
            "synth.image_size" => s.image_size.to_string(),
            "synth.cct_groups" => s.cct_groups.iter().map(|(a, b)| format!("{a}-{b}")).collect::<Vec<_>>().join(";"),
            "synth.css_jitter" => s.css_jitter.to_string(),
            "synth.noise_sigma" => s.noise_sigma.to_string(),
            "synth.patches" => s.scene_style.patches.to_string(),
            "synth.chroma" => s.scene_style.chroma.to_string(),
            "synth.neutral_background" => s.scene_style.neutral_background.to_string(),
            "synth.spd_jitter_fraction" => s.spd_jitter_fraction.to_string(),
            "synth.seed" => s.seed.to_string(),
            "tasks.bins" => self.histogram.bins.to_string(),
            "tasks.global_edges" => self.histogram.global_edges.to_string(),
            "tasks.single_bin_fallback" => self.histogram.single_bin_fallback.to_string(),
            "tasks.min_task_size" => self.min_task_size.to_string(),
            "train.variant" => t.variant.to_string(),
            "train.meta_batch_size" => t.meta_batch_size.to_string(),
            "train.k_train" => t.k_train.to_string(),
            "train.q_train" => t.q_train.to_string(),
            "train.n_train" => t.n_train.to_string(),
            "train.beta" => t.beta.to_string(),
            "train.beta_decay_rate" => t.beta_decay_rate.to_string(),
            "train.beta_decay_interval" => t.beta_decay_interval.to_string(),
            "train.alpha_init" => t.alpha_init.to_string(),
            "train.iterations" => t.iterations.to_string(),
            "train.meta_grad" => t.meta_grad.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.input_size" => t.input_size.to_string(),
            "train.spec" => t.spec.clone(),
            "train.held_out_camera" => t.held_out_camera.clone().unwrap_or_default(),
            "train.knn_train" => t.knn_train.unwrap_or(0).to_string(),
            "eval.k_test" => self.eval.k_test.to_string(),
            "eval.n_test" => self.eval.n_test.to_string(),
            "eval.draws" => self.eval.draws.to_string(),
            "eval.seed" => self.eval.seed.to_string(),
            _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
        })
    }

    /// Applies `key = value` lines.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("{origin}:{}: expected key = value", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::invalid(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// All keys and values, one `key = value` per line, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }
}
