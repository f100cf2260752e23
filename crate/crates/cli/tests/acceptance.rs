//! End-to-end acceptance checks. Runs without the libtest harness so that
//! every criterion prints one PASS/FAIL line; exits non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ccmeta::colorsci::{cct_from_xy, cct_oracle, planckian_chromaticity, Kelvin};
use ccmeta::dataio::{crop_resize, gamma_encode, load_images, load_manifest, preprocess, ManifestRecord, ProcessedImage, RawImage};
use ccmeta::eval::{evaluate_curve, stats, DrawReport, EvalConfig};
use ccmeta::meta::{batch_from, meta_train, TrainConfig, Variant};
use ccmeta::nn::{angular_loss, angular_loss_grad, backward, forward, init_params, inner_adapt, meta_backward, AlphaState, Batch, MetaGradMode, NetworkSpec};
use ccmeta::seed::derive_seed;
use ccmeta::synthcam::{generate_dataset, SynthConfig};
use ccmeta::tasks::{assign_tasks, build_histograms, compute_ccts, gt_spread, HistogramOptions, TaskSpec};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed < Duration::from_secs(limit_s)
}

// 1 --------------------------------------------------------------------------

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for i in 0..200 {
        let t = 3000.0 + 12000.0 * i as f64 / 199.0;
        let c = planckian_chromaticity(Kelvin::new(t).unwrap());
        let fit = cct_from_xy(&c).unwrap().value();
        let oracle = cct_oracle(&c).unwrap().value();
        worst = worst.max((fit - oracle).abs());
    }
    let el = t0.elapsed();
    outcome(worst <= 100.0 && within(el, 30), format!("max |fit - oracle| = {worst:.1} K over 200 locus points, {el:.2?}"))
}

// 2 --------------------------------------------------------------------------

/// A random architecture from the layer vocabulary with at most 200
/// parameters.
fn random_spec(rng: &mut ChaCha8Rng) -> NetworkSpec {
    loop {
        let side = rng.gen_range(3..=4);
        let mut layers = Vec::new();
        for _ in 0..rng.gen_range(1..=2) {
            layers.push(format!("conv{}", rng.gen_range(2..=4)));
            if rng.gen_bool(0.6) {
                layers.push("ln".into());
            }
            layers.push("relu".into());
        }
        layers.push("avgpool".into());
        if rng.gen_bool(0.6) {
            layers.push(format!("dense{}", rng.gen_range(3..=6)));
            if rng.gen_bool(0.5) {
                layers.push("ln".into());
            }
            layers.push("relu".into());
        }
        layers.push("dense3".into());
        let spec: NetworkSpec = format!("{side}x{side}x3:{}", layers.join(",")).parse().unwrap();
        if spec.param_count() <= 200 {
            return spec;
        }
    }
}

fn random_batch(spec: &NetworkSpec, n: usize, rng: &mut ChaCha8Rng) -> Batch<f64> {
    let x = (0..n * spec.input_size()).map(|_| rng.gen_range(0.0..1.0)).collect();
    let gts = (0..n).map(|_| [0, 1, 2].map(|_| rng.gen_range(0.2..1.0))).collect();
    Batch::new(spec, x, gts).unwrap()
}

fn batch_loss(spec: &NetworkSpec, theta: &[f64], b: &Batch<f64>) -> f64 {
    let p = forward(spec, theta, &b.x, b.len()).unwrap();
    p.chunks(3).zip(&b.gts).map(|(p, g)| angular_loss([p[0], p[1], p[2]], *g)).sum::<f64>() / b.len() as f64
}

fn adapted_loss(spec: &NetworkSpec, theta: &[f64], alpha: &AlphaState, s: &Batch<f64>, q: &Batch<f64>, n: usize) -> f64 {
    let tr = inner_adapt(spec, theta, alpha, s, n).unwrap();
    batch_loss(spec, &tr.theta, q)
}

/// Initial parameters plus uniform noise. Zero-initialized biases can leave
/// a sample whose ReLUs are all dead with a prediction of exactly zero,
/// where the angular loss is not differentiable; the noise moves the check
/// off that set.
fn generic_point(spec: &NetworkSpec, seed: u64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    init_params(spec, seed).theta_as::<f64>().iter().map(|t| t + rng.gen_range(-0.1..0.1)).collect()
}

/// Largest relative deviation, with `floor` keeping near-zero entries from
/// dividing by noise.
fn rel_err(fd: f64, g: f64, floor: f64) -> f64 {
    (fd - g).abs() / fd.abs().max(g.abs()).max(floor)
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let h = 1e-6;
    let (mut worst_b, mut worst_m) = (0.0f64, 0.0f64);
    let mut max_params = 0;
    let mut layouts = std::collections::BTreeSet::new();
    for trial in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let spec = random_spec(&mut rng);
        max_params = max_params.max(spec.param_count());
        layouts.insert(spec.to_string());
        let theta = generic_point(&spec, 50 + trial, &mut rng);
        let b = random_batch(&spec, 3, &mut rng);
        let tape = backward(&spec, &theta, &b.x, &b.gts).unwrap();
        for i in 0..theta.len() {
            let (mut p, mut m) = (theta.clone(), theta.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (batch_loss(&spec, &p, &b) - batch_loss(&spec, &m, &b)) / (2.0 * h);
            worst_b = worst_b.max(rel_err(fd, tape.grad[i], 1e-4));
        }
    }
    for trial in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + trial);
        let spec = random_spec(&mut rng);
        max_params = max_params.max(spec.param_count());
        layouts.insert(spec.to_string());
        let theta = generic_point(&spec, 80 + trial, &mut rng);
        let mut alpha = AlphaState::per_layer_per_step(&spec, 2, 0.0);
        for a in alpha.values_mut() {
            *a = rng.gen_range(0.05..0.3);
        }
        let (s, q) = (random_batch(&spec, 4, &mut rng), random_batch(&spec, 3, &mut rng));
        let mg = meta_backward(&spec, &theta, &alpha, &s, &q, 2, MetaGradMode::Exact).unwrap();
        for i in 0..theta.len() {
            let (mut p, mut m) = (theta.clone(), theta.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (adapted_loss(&spec, &p, &alpha, &s, &q, 2) - adapted_loss(&spec, &m, &alpha, &s, &q, 2)) / (2.0 * h);
            worst_m = worst_m.max(rel_err(fd, mg.theta[i], 1e-3));
        }
    }
    let el = t0.elapsed();
    outcome(
        worst_b <= 1e-4 && worst_m <= 1e-3 && max_params <= 200 && within(el, 60),
        format!(
            "backward max rel err {worst_b:.2e}, meta_backward(exact, n=2) {worst_m:.2e}, {} distinct random specs of <= {max_params} params, 40 trials, {el:.2?}",
            layouts.len()
        ),
    )
}

// 3 --------------------------------------------------------------------------

fn criterion_3(images: &[ProcessedImage], tasks: &[TaskSpec]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_dot = 0.0f64;
    for _ in 0..10_000 {
        let p = [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0));
        let g = [0, 1, 2].map(|_| rng.gen_range(0.01..1.0));
        let lv = angular_loss_grad(p, g);
        let n = |v: [f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let dot = lv.grad.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>();
        let scale = n(lv.grad) * n(p);
        if scale > 0.0 {
            worst_dot = worst_dot.max(dot.abs() / scale);
        }
    }
    let ortho = worst_dot <= 4.0 * f64::EPSILON;

    // One MAML outer step on one task, against an update built by hand:
    // theta - beta * d/dtheta L_query(theta - alpha * grad L_support(theta)),
    // the derivative taken by central differences in f64.
    let config = TrainConfig {
        variant: Variant::Maml,
        meta_batch_size: 1,
        k_train: 4,
        q_train: 4,
        n_train: 1,
        beta: 0.01,
        alpha_init: 0.05,
        iterations: 1,
        input_size: 8,
        spec: "conv4,ln,relu,avgpool,dense3".into(),
        held_out_camera: Some("cam03".into()),
        ..TrainConfig::default()
    };
    let out = meta_train(&config, images, tasks).unwrap();
    let spec = config.network().unwrap();
    let theta0: Vec<f64> = init_params(&spec, derive_seed(config.seed, &["init"])).theta_as();
    let ep = &out.episodes[0];
    let mut crng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &["crop", "0", "0"]));
    let to_f64 = |b: Batch<f32>| Batch::new(&spec, b.x.iter().map(|&v| v as f64).collect(), b.gts).unwrap();
    let s = to_f64(batch_from(&spec, ep.support.iter().map(|&i| &images[i]), |im| crop_resize(im, config.input_size, &mut crng)).unwrap());
    let q = to_f64(batch_from(&spec, ep.query.iter().map(|&i| &images[i]), |im| crop_resize(im, config.input_size, &mut crng)).unwrap());
    let composite = |th: &[f64]| {
        let g = backward(&spec, th, &s.x, &s.gts).unwrap().grad;
        let adapted: Vec<f64> = th.iter().zip(&g).map(|(t, g)| t - config.alpha_init as f64 * g).collect();
        batch_loss(&spec, &adapted, &q)
    };
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..theta0.len() {
        let (mut p, mut m) = (theta0.clone(), theta0.clone());
        p[i] += h;
        m[i] -= h;
        let fd = (composite(&p) - composite(&m)) / (2.0 * h);
        let expect = theta0[i] - config.beta * fd;
        worst = worst.max((expect - out.checkpoint.theta[i] as f64).abs());
    }
    let step = worst <= 1e-6;
    outcome(
        ortho && step,
        format!("max |<grad, p>|/(|grad||p|) = {worst_dot:.1e}; one outer step vs hand update: max abs diff {worst:.2e} over {} params", theta0.len()),
    )
}

// 4 --------------------------------------------------------------------------

fn criterion_4(images: &[ProcessedImage], records: &[ManifestRecord], config: &SynthConfig) -> Outcome {
    let opts = |bins| HistogramOptions { bins, ..Default::default() };
    let two = assign_tasks(images, &build_histograms(images, &opts(2)).unwrap(), 1).unwrap();
    let one = assign_tasks(images, &build_histograms(images, &opts(1)).unwrap(), 1).unwrap();
    let mut min_purity = 1.0f64;
    for task in &two {
        let warm = task.members.iter().filter(|&&i| records[i].nominal_cct.unwrap() <= 4000.0).count();
        min_purity = min_purity.min(warm.max(task.len() - warm) as f64 / task.len() as f64);
    }
    let mut spread_ok = one.len() == config.cameras;
    let mut worst_ratio = 0.0f64;
    for whole in &one {
        let mine: Vec<_> = two.iter().filter(|t| t.camera_id == whole.camera_id).collect();
        let split = mine.iter().map(|t| gt_spread(images, &t.members)).sum::<f64>() / mine.len().max(1) as f64;
        let full = gt_spread(images, &whole.members);
        spread_ok &= mine.len() == 2 && split < full;
        worst_ratio = worst_ratio.max(split / full);
    }
    outcome(
        two.len() == 2 * config.cameras && min_purity >= 0.95 && spread_ok,
        format!(
            "{} cameras x {} scenes: min M=2 purity {:.1}%, worst M=2/M=1 spread ratio {worst_ratio:.3}",
            config.cameras,
            config.scenes_per_camera,
            100.0 * min_purity
        ),
    )
}

// 5 and 6 --------------------------------------------------------------------

struct Experiment {
    lslr: Vec<DrawReport>,
    baseline: Vec<DrawReport>,
    k5: Vec<DrawReport>,
    k20: Vec<DrawReport>,
    elapsed: Duration,
}

fn run_experiment(images: &[ProcessedImage], tasks: &[TaskSpec]) -> Experiment {
    let t0 = Instant::now();
    let base = TrainConfig {
        variant: Variant::Lslr,
        meta_batch_size: 4,
        k_train: 10,
        q_train: 10,
        n_train: 5,
        iterations: 2000,
        input_size: 16,
        spec: "desk".into(),
        held_out_camera: Some("cam03".into()),
        ..TrainConfig::default()
    };
    let lslr = meta_train(&base, images, tasks).unwrap();
    let baseline = meta_train(&TrainConfig { variant: Variant::Baseline, ..base.clone() }, images, tasks).unwrap();
    let eval = EvalConfig {
        k_test: 10,
        n_test: 10,
        draws: 10,
        ..EvalConfig::default()
    };
    let lslr_curve = evaluate_curve(&lslr.checkpoint, images, tasks, "cam03", &eval).unwrap();
    let base_curve = evaluate_curve(&baseline.checkpoint, images, tasks, "cam03", &eval).unwrap();
    let elapsed = t0.elapsed();
    let k5 = evaluate_curve(&lslr.checkpoint, images, tasks, "cam03", &EvalConfig { k_test: 5, ..eval }).unwrap();
    let k20 = evaluate_curve(&lslr.checkpoint, images, tasks, "cam03", &EvalConfig { k_test: 20, ..eval }).unwrap();
    Experiment {
        lslr: lslr_curve,
        baseline: base_curve,
        k5,
        k20,
        elapsed,
    }
}

fn headlines(c: &[DrawReport]) -> String {
    c.iter().map(|r| format!("{:.2}", r.headline)).collect::<Vec<_>>().join(" ")
}

fn criterion_5(e: &Experiment) -> Outcome {
    let zero = e.lslr[0].headline;
    let ten = e.lslr[10].headline;
    let base = e.baseline[10].headline;
    let a = ten <= 0.8 * zero;
    let b = ten < base;
    outcome(
        a && b && within(e.elapsed, 600),
        format!(
            "held-out cam03: LSLR n_test=10 {ten:.3} deg vs n_test=0 {zero:.3} deg ({:.0}% lower), baseline n_test=10 {base:.3} deg; train+eval {:.0?}\n    LSLR curve n=0..10: {}\n    baseline curve n=0..10: {}",
            100.0 * (1.0 - ten / zero),
            e.elapsed,
            headlines(&e.lslr),
            headlines(&e.baseline)
        ),
    )
}

fn criterion_6(e: &Experiment) -> Outcome {
    let (n1, n5) = (e.lslr[1].headline, e.lslr[5].headline);
    let (k5, k20) = (e.k5[10].headline, e.k20[10].headline);
    outcome(
        n5 <= n1 && k20 <= k5 + 0.1,
        format!(
            "n_test=1 {n1:.3} deg, n_test=5 {n5:.3} deg; K_test=5 {k5:.3} deg, K_test=20 {k20:.3} deg (n_test=10)\n    K_test=5 curve: {}\n    K_test=20 curve: {}",
            headlines(&e.k5),
            headlines(&e.k20)
        ),
    )
}

// 7 --------------------------------------------------------------------------

fn naive_stats(v: &[f64]) -> [f64; 6] {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    let q = |p: f64| {
        let pos = p * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
    };
    let mean = s.iter().sum::<f64>() / n as f64;
    let median = q(0.5);
    let trimean = (q(0.25) + 2.0 * median + q(0.75)) / 4.0;
    let k = n.div_ceil(4);
    let best = s[..k].iter().sum::<f64>() / k as f64;
    let worst = s[n - k..].iter().sum::<f64>() / k as f64;
    let gm = (mean * median * trimean * best * worst).powf(0.2);
    [mean, median, trimean, best, worst, gm]
}

fn criterion_7() -> Outcome {
    let st = stats(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap().as_array();
    let gm = (3.0f64 * 3.0 * 3.0 * 1.5 * 4.5).powf(0.2);
    let expected = [3.0, 3.0, 3.0, 1.5, 4.5, gm];
    let exact = st[..5] == expected[..5] && (st[5] - gm).abs() <= 4.0 * f64::EPSILON * gm;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..60);
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..40.0)).collect();
        let a = stats(&v).unwrap().as_array();
        let b = naive_stats(&v);
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs());
        }
    }
    outcome(
        exact && worst <= 1e-9,
        format!("stats(1..5) = {st:?}; 1000 random lists max abs diff {worst:.1e}"),
    )
}

// 8 --------------------------------------------------------------------------

fn cli_run(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let exe = env!("CARGO_BIN_EXE_ccmeta");
    let sets = [
        "synth.cameras=3",
        "synth.scenes_per_camera=40",
        "synth.image_size=16",
        "train.iterations=6",
        "train.meta_batch_size=3",
        "train.n_train=2",
        "train.input_size=8",
        "train.spec=conv4,ln,relu,avgpool,dense3",
        "tasks.min_task_size=10",
        "train.k_train=4",
        "train.q_train=4",
        "train.held_out_camera=cam02",
        "eval.k_test=4",
        "eval.n_test=2",
        "eval.draws=2",
    ];
    let mut common = vec!["--workers".to_string(), "1".to_string()];
    for s in sets {
        common.push("--set".into());
        common.push(s.into());
    }
    let d = |p: &str| dir.join(p).display().to_string();
    let steps: [Vec<String>; 3] = [
        vec!["synth".into(), "--out".into(), d("data")],
        vec!["train".into(), "--manifest".into(), d("data/manifest.csv"), "--out".into(), d("run")],
        vec![
            "eval".into(),
            "--checkpoint".into(),
            d("run/checkpoint.bin"),
            "--manifest".into(),
            d("data/manifest.csv"),
            "--camera".into(),
            "cam02".into(),
            "--out".into(),
            d("eval"),
        ],
    ];
    for args in steps {
        let out = Command::new(exe).args(&args).args(&common).output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
        }
    }
    ["data/manifest.csv", "run/train_log.csv", "eval/report.csv", "run/checkpoint.bin"]
        .iter()
        .map(|p| std::fs::read(dir.join(p)).map(|b| (p.to_string(), b)).map_err(|e| format!("{p}: {e}")))
        .collect()
}

fn criterion_8() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    match (cli_run(a.path()), cli_run(b.path())) {
        (Ok(x), Ok(y)) => {
            let differing: Vec<&str> = x.iter().zip(&y).filter(|(p, q)| p.1 != q.1).map(|(p, _)| p.0.as_str()).collect();
            outcome(
                differing.is_empty(),
                if differing.is_empty() {
                    format!("{} identical across two runs", x.iter().map(|p| p.0.as_str()).collect::<Vec<_>>().join(", "))
                } else {
                    format!("differ across runs: {}", differing.join(", "))
                },
            )
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}

// 9 --------------------------------------------------------------------------

fn record(black_level: f64) -> ManifestRecord {
    ManifestRecord {
        id: 0,
        rel_path: "x.png".into(),
        path: "x.png".into(),
        camera_id: "cam".into(),
        gt: ccmeta::colorsci::IlluminantRgb::new(1.0, 1.0, 1.0).unwrap(),
        nominal_cct: None,
        masks: Vec::new(),
        black_level,
    }
}

fn criterion_9() -> Outcome {
    let mid = gamma_encode(0.5) as f64;
    let top = preprocess(
        &RawImage {
            width: 1,
            height: 1,
            bit_depth: 16,
            data: vec![65535; 3],
        },
        &record(0.0),
    )
    .unwrap();
    let black = preprocess(
        &RawImage {
            width: 1,
            height: 1,
            bit_depth: 16,
            data: vec![2048; 3],
        },
        &record(2048.0),
    )
    .unwrap();
    let eight = preprocess(
        &RawImage {
            width: 1,
            height: 1,
            bit_depth: 8,
            data: vec![255, 0, 16],
        },
        &record(16.0),
    )
    .unwrap();
    let e = eight.image.get(0, 0);
    let want_e = [((239.0f64 / 255.0).powf(1.0 / 2.2)) as f32, 0.0, 0.0];
    let ok = (mid - 0.7297).abs() <= 1e-4
        && top.image.get(0, 0).iter().all(|&v| (v - 1.0).abs() <= 1e-4)
        && black.image.get(0, 0).iter().all(|&v| v.abs() <= 1e-4)
        && e.iter().zip(&want_e).all(|(a, b)| (a - b).abs() <= 1e-4);
    outcome(
        ok,
        format!(
            "0.5 -> {mid:.4}; 16-bit 65535 -> {:.4}; black level -> {:.4}; 8-bit (255, 0, 16) minus 16 -> {:?}",
            top.image.get(0, 0)[0],
            black.image.get(0, 0)[0],
            e
        ),
    )
}

fn main() {
    // libtest-style arguments (filters, --nocapture) are accepted and ignored
    let t0 = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("criterion {n} [{name}]: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "cct oracle agreement", criterion_1());
    report(2, "gradient correctness", criterion_2());
    report(7, "statistics oracle", criterion_7());
    report(9, "preprocessing conformance", criterion_9());

    let synth = SynthConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let generated = generate_dataset(&synth, dir.path()).unwrap();
    let manifest = load_manifest(&generated.manifest_path).unwrap();
    let mut images = load_images(&manifest).unwrap();
    let failed = compute_ccts(&mut images);
    let tasks = assign_tasks(&images, &build_histograms(&images, &HistogramOptions::default()).unwrap(), 20).unwrap();
    println!(
        "dataset: {} images, {} without a temperature, {} tasks",
        images.len(),
        failed.len(),
        tasks.len()
    );
    report(3, "loss and outer-step conformance", criterion_3(&images, &tasks));
    report(4, "task separation", criterion_4(&images, &manifest.records, &synth));
    report(8, "determinism", criterion_8());
    let e = run_experiment(&images, &tasks);
    report(5, "adaptation benefit", criterion_5(&e));
    report(6, "n_test and K_test trends", criterion_6(&e));

    results.sort_by_key(|r| r.0);
    let failed: Vec<String> = results.iter().filter(|r| !r.2.pass).map(|r| r.0.to_string()).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.0?}",
        results.len() - failed.len(),
        results.len(),
        t0.elapsed()
    );
    if !failed.is_empty() {
        println!("failed criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
}
