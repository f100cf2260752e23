//! `ccmeta`: dataset generation, task inspection, training, adaptation,
//! evaluation and reporting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ccmeta::colorsci::{cct_from_xy, Chromaticity};
use ccmeta::config::{RunConfig, KEYS};
use ccmeta::dataio::{load_images, load_manifest, ProcessedImage};
use ccmeta::eval::{cross_camera_gm, evaluate_curve, write_report, AngularErrorStats, DrawReport, REPORT_COLUMNS};
use ccmeta::meta::{adapt, meta_train, write_log, Variant};
use ccmeta::nn::Checkpoint;
use ccmeta::svg::{line_chart, scatter, ScatterPoint, Series};
use ccmeta::synthcam::generate_dataset;
use ccmeta::tasks::{assign_tasks, build_histograms, compute_ccts, knn_task, write_tasks_jsonl, TaskSpec};
use ccmeta::{Error, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn key_help() -> String {
    let d = RunConfig::default();
    let mut s = String::from(
        "Configuration keys (defaults < --config file < --set < dedicated flags):\n",
    );
    for (k, desc) in KEYS {
        let _ = writeln!(s, "  {k:<28} {:<20} {desc}", d.get(k).expect("listed key"));
    }
    s.push_str("\nExit codes: 0 success, 1 validation error, 2 I/O error.");
    s
}

#[derive(Parser)]
#[command(name = "ccmeta", version, about = "Camera-adaptive color constancy by meta-learning over color-temperature tasks", after_help = key_help())]
struct Cli {
    /// Worker threads; 1 gives bit-exact reproducible runs (results do not
    /// depend on this value either way).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-camera dataset.
    Synth(SynthArgs),
    /// Correlated color temperature of a chromaticity or of every image.
    Cct(CctArgs),
    /// Build temperature histograms and tasks.
    Tasks(TasksArgs),
    /// Meta-train (or train the joint baseline).
    Train(TrainArgs),
    /// Fine-tune a checkpoint on a support set and predict illuminants.
    Adapt(AdaptArgs),
    /// Run the multi-draw K-shot evaluation on one camera.
    Eval(EvalArgs),
    /// Merge evaluation reports and aggregate across cameras.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CctArgs {
    /// Chromaticity `x,y`.
    #[arg(long, conflicts_with = "manifest")]
    xy: Option<String>,
    #[arg(long, required_unless_present = "xy")]
    manifest: Option<PathBuf>,
    /// Per-image CSV (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TasksArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Histogram bins per camera (tasks.bins).
    #[arg(long)]
    bins: Option<usize>,
    /// Build one nearest-temperature task of this size instead.
    #[arg(long, requires_all = ["anchor", "camera"])]
    knn: Option<usize>,
    #[arg(long)]
    anchor: Option<f64>,
    #[arg(long)]
    camera: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    held_out: Option<String>,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated support image ids (manifest row numbers).
    #[arg(long, value_delimiter = ',')]
    support: Vec<usize>,
    /// Comma-separated image ids to predict.
    #[arg(long, value_delimiter = ',', required = true)]
    targets: Vec<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Repeatable; one set of report rows per checkpoint.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    camera: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    k_test: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Report CSVs written by `eval`.
    #[arg(long, required = true)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn write(p: &Path, data: impl AsRef<[u8]>) -> Result<()> {
    fs::write(p, data).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    Ok(cfg)
}

fn set_opt<T: ToString>(cfg: &mut RunConfig, key: &str, v: &Option<T>) -> Result<()> {
    match v {
        Some(v) => cfg.set(key, &v.to_string()),
        None => Ok(()),
    }
}

/// Images with their image-derived temperatures.
fn load_dataset(manifest: &Path) -> Result<Vec<ProcessedImage>> {
    let m = load_manifest(manifest)?;
    let mut images = load_images(&m)?;
    let failed = compute_ccts(&mut images);
    if !failed.is_empty() {
        log::warn!("{} image(s) have no temperature and join no task", failed.len());
    }
    Ok(images)
}

fn bin_tasks(cfg: &RunConfig, images: &[ProcessedImage]) -> Result<Vec<TaskSpec>> {
    let hists = build_histograms(images, &cfg.histogram)?;
    assign_tasks(images, &hists, cfg.min_task_size)
}

fn cmd_synth(cfg: &mut RunConfig, a: &SynthArgs) -> Result<()> {
    set_opt(cfg, "synth.seed", &a.seed)?;
    let ds = generate_dataset(&cfg.synth, &a.out)?;
    let mut per_cam: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &ds.records {
        *per_cam.entry(&r.camera_id).or_default() += 1;
    }
    println!("manifest: {}", ds.manifest_path.display());
    for (cam, n) in per_cam {
        println!("{cam}: {n} images");
    }
    Ok(())
}

fn cmd_cct(a: &CctArgs) -> Result<()> {
    if let Some(xy) = &a.xy {
        let (x, y) = xy
            .split_once(',')
            .and_then(|(x, y)| Some((x.trim().parse().ok()?, y.trim().parse().ok()?)))
            .ok_or_else(|| Error::Invalid(format!("--xy expects x,y, got {xy:?}")))?;
        let t = cct_from_xy(&Chromaticity::new(x, y)?)?;
        println!("{:.1}", t.value());
        return Ok(());
    }
    let manifest = a.manifest.as_ref().expect("clap requires manifest");
    let m = load_manifest(manifest)?;
    let mut images = load_images(&m)?;
    compute_ccts(&mut images);
    let mut out = String::from("id,path,camera_id,nominal_cct,image_cct\n");
    for (r, img) in m.records.iter().zip(&images) {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.id,
            r.rel_path,
            r.camera_id,
            r.nominal_cct.map(|t| format!("{t:.1}")).unwrap_or_default(),
            img.cct.map(|t| format!("{:.1}", t.value())).unwrap_or_default()
        );
    }
    match &a.out {
        Some(p) => write(p, out),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn cmd_tasks(cfg: &mut RunConfig, a: &TasksArgs) -> Result<()> {
    set_opt(cfg, "tasks.bins", &a.bins)?;
    let images = load_dataset(&a.manifest)?;
    mkdir(&a.out)?;
    let hists = build_histograms(&images, &cfg.histogram)?;
    let tasks = match a.knn {
        Some(k) => vec![knn_task(&images, a.camera.as_deref().expect("clap"), a.anchor.expect("clap"), k)?],
        None => assign_tasks(&images, &hists, cfg.min_task_size)?,
    };
    write_tasks_jsonl(&a.out.join("tasks.jsonl"), &tasks)?;
    let mut csv = String::from("camera_id,bin,lo,hi,count\n");
    for h in &hists {
        for b in 0..h.bins() {
            let _ = writeln!(csv, "{},{b},{:.3},{:.3},{}", h.camera_id, h.edges[b], h.edges[b + 1], h.counts[b]);
        }
    }
    write(&a.out.join("histograms.csv"), csv)?;
    // ground truths in [r/g, b/g], coloured by bin
    let max_bins = hists.iter().map(|h| h.bins()).max().unwrap_or(1);
    let mut points = Vec::new();
    for img in &images {
        let Some(t) = img.cct else { continue };
        let Some(h) = hists.iter().find(|h| h.camera_id == img.camera_id) else { continue };
        let Some(b) = h.bin_of(t.value()) else { continue };
        let g = img.gt.g();
        points.push(ScatterPoint {
            x: img.gt.r() / g,
            y: img.gt.b() / g,
            class: b,
        });
    }
    let classes: Vec<String> = (0..max_bins).map(|b| format!("bin {b}")).collect();
    write(
        &a.out.join("scatter.svg"),
        scatter("Ground-truth illuminants by temperature bin", "r/g", "b/g", &points, &classes),
    )?;
    for h in &hists {
        println!("{}: edges {:?} counts {:?}", h.camera_id, h.edges.iter().map(|e| e.round()).collect::<Vec<_>>(), h.counts);
    }
    println!("{} task(s) written to {}", tasks.len(), a.out.join("tasks.jsonl").display());
    Ok(())
}

fn cmd_train(cfg: &mut RunConfig, a: &TrainArgs) -> Result<()> {
    set_opt(cfg, "train.variant", &a.variant)?;
    set_opt(cfg, "train.iterations", &a.iterations)?;
    set_opt(cfg, "train.seed", &a.seed)?;
    set_opt(cfg, "train.held_out_camera", &a.held_out)?;
    cfg.train.validate()?;
    let images = load_dataset(&a.manifest)?;
    let tasks = if cfg.train.variant == Variant::Baseline {
        Vec::new()
    } else {
        bin_tasks(cfg, &images)?
    };
    mkdir(&a.out)?;
    let out = meta_train(&cfg.train, &images, &tasks)?;
    out.checkpoint.save(&a.out.join("checkpoint.bin"))?;
    write_log(&a.out.join("train_log.csv"), &out.log)?;
    write(&a.out.join("config.txt"), cfg.to_text())?;
    if let Some(last) = out.log.last() {
        println!(
            "{} trained for {} iterations; final outer loss {:.3} deg",
            cfg.train.variant, last.iteration, last.mean_outer_loss_degrees
        );
    }
    println!("checkpoint: {}", a.out.join("checkpoint.bin").display());
    Ok(())
}

fn cmd_adapt(cfg: &mut RunConfig, a: &AdaptArgs) -> Result<()> {
    set_opt(cfg, "eval.n_test", &a.n_test)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let m = load_manifest(&a.manifest)?;
    let images = load_images(&m)?;
    let get = |id: usize| images.get(id).ok_or_else(|| Error::Invalid(format!("image id {id} not in the manifest")));
    let support: Vec<&ProcessedImage> = a.support.iter().map(|&i| get(i)).collect::<Result<_>>()?;
    let targets: Vec<&ProcessedImage> = a.targets.iter().map(|&i| get(i)).collect::<Result<_>>()?;
    let adapted = adapt(&ck, &support, cfg.eval.n_test)?;
    let preds = adapted.predict(&targets)?;
    let mut out = String::from("id,camera_id,pred_r,pred_g,pred_b,angular_error_degrees\n");
    for (img, p) in targets.iter().zip(&preds) {
        let err = ccmeta::colorsci::angular_error_raw(p, &img.gt.to_array()).unwrap_or(90.0);
        let _ = writeln!(out, "{},{},{:.6},{:.6},{:.6},{:.4}", img.id, img.camera_id, p[0], p[1], p[2], err);
    }
    match &a.out {
        Some(p) => write(p, out),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn curve_series(label: &str, reports: &[DrawReport]) -> Series {
    Series {
        label: label.to_owned(),
        points: reports.iter().map(|r| (r.n_test as f64, r.headline, r.headline_std)).collect(),
    }
}

fn cmd_eval(cfg: &mut RunConfig, a: &EvalArgs) -> Result<()> {
    set_opt(cfg, "eval.k_test", &a.k_test)?;
    set_opt(cfg, "eval.n_test", &a.n_test)?;
    set_opt(cfg, "eval.draws", &a.draws)?;
    set_opt(cfg, "eval.seed", &a.seed)?;
    let images = load_dataset(&a.manifest)?;
    let tasks = bin_tasks(cfg, &images)?;
    mkdir(&a.out)?;
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for path in &a.checkpoint {
        let ck = Checkpoint::load(path)?;
        let curve = evaluate_curve(&ck, &images, &tasks, &a.camera, &cfg.eval)?;
        let last = curve.last().expect("n_test + 1 reports");
        println!(
            "{} on {}: headline {:.3} deg (n_test 0: {:.3})",
            ck.variant, a.camera, last.headline, curve[0].headline
        );
        series.push(curve_series(&ck.variant, &curve));
        rows.extend(curve);
    }
    write_report(&a.out.join("report.csv"), &rows)?;
    write(
        &a.out.join("curve.svg"),
        line_chart(
            &format!("Median angular error vs fine-tuning steps ({}, K_test = {})", a.camera, cfg.eval.k_test),
            "n_test",
            "median angular error (deg), bars: std over draws",
            &series,
        ),
    )?;
    println!("report: {}", a.out.join("report.csv").display());
    Ok(())
}

struct Row {
    camera: String,
    variant: String,
    k: usize,
    n: usize,
    stats: AngularErrorStats,
    headline: f64,
}

fn read_report(path: &Path) -> Result<Vec<Row>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let bad = |line: usize, msg: &str| Error::Format {
        path: path.to_path_buf(),
        message: format!("line {line}: {msg}"),
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h == REPORT_COLUMNS.join(",") => {}
        _ => return Err(bad(1, "missing report header")),
    }
    lines
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != REPORT_COLUMNS.len() {
                return Err(bad(i + 1, "wrong column count"));
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad(i + 1, "bad number"));
            Ok(Row {
                camera: f[0].into(),
                variant: f[1].into(),
                k: f[2].parse().map_err(|_| bad(i + 1, "bad K_test"))?,
                n: f[3].parse().map_err(|_| bad(i + 1, "bad n_test"))?,
                stats: AngularErrorStats {
                    mean: num(4)?,
                    median: num(5)?,
                    trimean: num(6)?,
                    best25: num(7)?,
                    worst25: num(8)?,
                    gm: num(9)?,
                },
                headline: num(10)?,
            })
        })
        .collect()
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for p in &a.input {
        rows.extend(read_report(p)?);
    }
    let mut groups: BTreeMap<(String, usize, usize), Vec<&Row>> = BTreeMap::new();
    for r in &rows {
        groups.entry((r.variant.clone(), r.k, r.n)).or_default().push(r);
    }
    mkdir(&a.out)?;
    let mut csv = String::from(
        "# statistics are geometric means across cameras of the per-camera values\nvariant,K_test,n_test,cameras,mean,median,trimean,best25,worst25,gm,headline_median_over_draws\n",
    );
    let mut by_variant: BTreeMap<(String, usize), Vec<(f64, f64, f64)>> = BTreeMap::new();
    for ((variant, k, n), rs) in &groups {
        let s = cross_camera_gm(&rs.iter().map(|r| r.stats).collect::<Vec<_>>())?;
        let headline = (rs.iter().map(|r| r.headline.ln()).sum::<f64>() / rs.len() as f64).exp();
        let mut cams: Vec<&str> = rs.iter().map(|r| r.camera.as_str()).collect();
        cams.dedup();
        let _ = writeln!(
            csv,
            "{variant},{k},{n},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            cams.join(";"),
            s.mean,
            s.median,
            s.trimean,
            s.best25,
            s.worst25,
            s.gm,
            headline
        );
        by_variant.entry((variant.clone(), *k)).or_default().push((*n as f64, headline, 0.0));
    }
    write(&a.out.join("summary.csv"), csv)?;
    let series: Vec<Series> = by_variant
        .into_iter()
        .map(|((v, k), points)| Series {
            label: format!("{v} K={k}"),
            points,
        })
        .collect();
    write(
        &a.out.join("summary.svg"),
        line_chart("Headline median error across cameras", "n_test", "degrees (geometric mean over cameras)", &series),
    )?;
    println!("{} configuration(s) summarised in {}", groups.len(), a.out.join("summary.csv").display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(&mut cfg, a),
        Command::Cct(a) => cmd_cct(a),
        Command::Tasks(a) => cmd_tasks(&mut cfg, a),
        Command::Train(a) => cmd_train(&mut cfg, a),
        Command::Adapt(a) => cmd_adapt(&mut cfg, a),
        Command::Eval(a) => cmd_eval(&mut cfg, a),
        Command::Report(a) => cmd_report(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .parse_env("CCMETA_LOG")
        .init();
    if cli.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global() {
            eprintln!("error: cannot configure {} workers: {e}", cli.workers);
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
