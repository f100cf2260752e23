use ccmeta::dataio::{load_images, load_manifest};
use ccmeta::synthcam::{generate_dataset, SynthConfig};
use ccmeta::tasks::{assign_tasks, build_histograms, compute_ccts, gt_spread, HistogramOptions};

#[test]
fn warm_and_cold_light_separate_into_bins() {
    let dir = tempfile::tempdir().unwrap();
    let config = SynthConfig::default();
    let generated = generate_dataset(&config, dir.path()).unwrap();
    let manifest = load_manifest(&generated.manifest_path).unwrap();
    let mut images = load_images(&manifest).unwrap();
    let failed = compute_ccts(&mut images);
    assert!(failed.is_empty(), "no temperature for {failed:?}");

    let opts = |bins| HistogramOptions { bins, ..Default::default() };
    let two = assign_tasks(&images, &build_histograms(&images, &opts(2)).unwrap(), 1).unwrap();
    let one = assign_tasks(&images, &build_histograms(&images, &opts(1)).unwrap(), 1).unwrap();
    assert_eq!(two.len(), 2 * config.cameras);
    assert_eq!(one.len(), config.cameras);

    for task in &two {
        let warm = task
            .members
            .iter()
            .filter(|&&i| manifest.records[i].nominal_cct.unwrap() <= 3500.0)
            .count();
        let purity = warm.max(task.len() - warm) as f64 / task.len() as f64;
        eprintln!("{} {:?}: {} images, purity {purity:.3}", task.camera_id, task.key, task.len());
        assert!(purity >= 0.95);
    }
    for whole in &one {
        let mine: Vec<_> = two.iter().filter(|t| t.camera_id == whole.camera_id).collect();
        let split = mine.iter().map(|t| gt_spread(&images, &t.members)).sum::<f64>() / mine.len() as f64;
        let full = gt_spread(&images, &whole.members);
        eprintln!("{}: spread M=2 {split:.3} deg, M=1 {full:.3} deg", whole.camera_id);
        assert!(split < full);
    }
}
