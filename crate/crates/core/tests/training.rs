use wsr_core::render::{render_sorted_reference, RenderOptions};
use wsr_core::scene::WeightKind;
use wsr_core::synth::orbit_camera;
use wsr_core::train::trainer::mean_psnr;
use wsr_core::train::{train, train_from, Dataset, InitConfig, TrainConfig, View};

fn small_dataset(views: usize) -> Dataset {
    let truth = InitConfig {
        weight_model: WeightKind::Lc,
        count: 6,
        sh_degree_color: 0,
        sh_degree_opacity: 0,
        opacity: 0.8,
        scale_fraction: 0.12,
        ..InitConfig::default()
    }
    .build(99)
    .unwrap();
    let opts = RenderOptions::default();
    Dataset::new(
        (0..views)
            .map(|i| {
                let theta = i as f64 * 0.5;
                let camera = orbit_camera(4.0, theta, 0.3, 0.9, 24).unwrap();
                let image = render_sorted_reference(&truth, &camera, &opts).unwrap();
                View { id: i.to_string(), camera, image }
            })
            .collect(),
    )
    .unwrap()
}

fn quick_config(model: WeightKind, iterations: usize) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.iterations = iterations;
    cfg.init.weight_model = model;
    cfg.init.count = 30;
    cfg.init.sh_degree_color = 1;
    cfg.init.sh_degree_opacity = 1;
    cfg.densify.start = 20;
    cfg.densify.interval = 20;
    cfg.eval_interval = 10;
    cfg
}

#[test]
fn empty_dataset_is_an_error() {
    assert!(train(&Dataset::default(), &quick_config(WeightKind::Lc, 5)).is_err());
}

#[test]
fn mismatched_image_is_rejected() {
    let mut ds = small_dataset(1);
    ds.views[0].camera.width = 30;
    assert!(Dataset::new(ds.views).is_err());
}

#[test]
fn zero_iterations_returns_initial_scene() {
    let ds = small_dataset(2);
    let cfg = quick_config(WeightKind::Exp, 0);
    let init = cfg.init.build(cfg.seed).unwrap();
    let (scene, log) = train_from(init.clone(), &ds, &cfg).unwrap();
    assert_eq!(scene, init);
    assert_eq!(log.records.len(), 1);
}

#[test]
fn training_is_deterministic() {
    let ds = small_dataset(3);
    let cfg = quick_config(WeightKind::Lc, 45);
    let (a, la) = train(&ds, &cfg).unwrap();
    let (b, lb) = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap()
        .install(|| train(&ds, &cfg).unwrap());
    assert_eq!(a, b);
    assert_eq!(la, lb);
}

#[test]
fn densification_runs_and_scene_stays_valid() {
    let ds = small_dataset(3);
    let (scene, log) = train(&ds, &quick_config(WeightKind::Exp, 60)).unwrap();
    scene.validate().unwrap();
    assert!(log.records.iter().any(|r| r.elements != 30), "densify never changed the element count");
    assert!(scene.weight_model.sigma > 0.0 && scene.background_weight >= 0.0);
}

#[test]
fn full_batch_descent() {
    let ds = small_dataset(1);
    let mut cfg = quick_config(WeightKind::Dir, 50);
    cfg.densify.start = usize::MAX;
    cfg.eval_interval = 1;
    let (_, log) = train(&ds, &cfg).unwrap();
    let losses: Vec<f64> = log.records[1..].iter().map(|r| r.loss.unwrap()).collect();
    assert_eq!(losses.len(), 50);
    let smoothed: Vec<f64> = losses.chunks(10).map(|c| c.iter().sum::<f64>() / 10.0).collect();
    for w in smoothed.windows(2) {
        assert!(w[1] < w[0], "smoothed loss did not decrease: {smoothed:?}");
    }
}

#[test]
fn training_improves_psnr_for_every_model() {
    let ds = small_dataset(3);
    for model in [WeightKind::Dir, WeightKind::Exp, WeightKind::Lc] {
        let cfg = quick_config(model, 80);
        let init = cfg.init.build(cfg.seed).unwrap();
        let before = mean_psnr(&init, &ds, &RenderOptions::default()).unwrap();
        let (_, log) = train(&ds, &cfg).unwrap();
        let after = log.final_psnr().unwrap();
        assert!(after > before + 3.0, "{model:?}: {before} -> {after}");
    }
}

#[test]
fn checkpoints_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(2);
    let mut cfg = quick_config(WeightKind::Lc, 10);
    cfg.checkpoint_interval = 4;
    cfg.checkpoint_dir = Some(dir.path().to_path_buf());
    train(&ds, &cfg).unwrap();
    for it in [4, 8, 10] {
        let p = dir.path().join(format!("checkpoint_{it:06}.ply"));
        assert!(p.exists(), "{p:?}");
        wsr_core::io::load_ply(&p).unwrap();
    }
}

#[test]
fn config_rejects_unknown_keys() {
    let ok: TrainConfig = serde_json::from_str(r#"{"iterations": 7, "init": {"count": 3}}"#).unwrap();
    assert_eq!(ok.iterations, 7);
    assert_eq!(ok.init.count, 3);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"iterations": 7, "itrations": 3}"#).is_err());
}
