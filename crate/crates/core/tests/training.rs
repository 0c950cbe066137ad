use std::path::{Path, PathBuf};

use npkit::dataio::{load_mnist, mnist_paths, Checkpoint, ImageDataset, Split};
use npkit::model::{GridSpec, ModelConfig, PointSet};
use npkit::rng::Rng;
use npkit::training::{train, TrainConfig};

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("NPKIT_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    mnist_paths(&dir, Split::Train).0.exists().then_some(dir)
}

fn tiny() -> (ModelConfig, TrainConfig, ImageDataset) {
    let model = ModelConfig {
        d_h: 8,
        d_s: 8,
        d_z: 4,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let mut rng = Rng::seed(9);
    let bytes: Vec<u8> = (0..12 * 100).map(|_| rng.below(256) as u8).collect();
    (model, train, ImageDataset::from_bytes(10, 10, &bytes, None))
}

#[test]
fn same_seed_same_trajectory() {
    let (model, cfg, data) = tiny();
    let mut a_traj = Vec::new();
    let a = train::<f64, _>(&model, &cfg, &data, 5, |_, m, _| {
        a_traj.push(m.params.clone());
        Ok(())
    })
    .unwrap();
    let mut b_traj = Vec::new();
    let b = train::<f64, _>(&model, &cfg, &data, 5, |_, m, _| {
        b_traj.push(m.params.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(a_traj, b_traj);
    assert_eq!(a.model, b.model);
    let objectives = |o: &[npkit::training::EpochMetrics]| o.iter().map(|m| m.mean_objective).collect::<Vec<_>>();
    assert_eq!(objectives(&a.metrics), objectives(&b.metrics));

    let c = train::<f64, _>(&model, &cfg, &data, 6, |_, _, _| Ok(())).unwrap();
    assert_ne!(a.model, c.model);
}

#[test]
fn desk_scale_run_learns_and_round_trips() {
    let Some(dir) = mnist_dir() else {
        eprintln!("MNIST not found, skipping");
        return;
    };
    let data = load_mnist(&dir, Split::Train, Some(2000)).unwrap();
    let cfg = TrainConfig {
        epochs: 6,
        ..TrainConfig::default()
    };
    let out = train::<f32, _>(&ModelConfig::default(), &cfg, &data, 1, |m, _, _| {
        assert!(m.mean_objective.is_finite());
        Ok(())
    })
    .unwrap();
    assert_eq!(out.metrics.len(), 6);
    assert!(out.metrics[5].mean_objective > out.metrics[0].mean_objective, "{:?}", out.metrics);

    let mut c = Checkpoint::new("desk");
    c.push_params("", &out.model.params);
    let restored = Checkpoint::from_bytes(&c.to_bytes())
        .unwrap()
        .model::<f32>(&ModelConfig::default())
        .unwrap();
    let grid = GridSpec { height: 28, width: 28 };
    let ctx = PointSet::from_pixels(grid, data.image(7), &[10, 200, 400, 650]).unwrap();
    let coords = grid.all_coords::<f32>();
    let z = out.model.sample_latents(&ctx, 1, &mut Rng::seed(3)).unwrap();
    assert_eq!(
        out.model.predict(&coords, &z[0]).unwrap(),
        restored.predict(&coords, &z[0]).unwrap()
    );
    assert_eq!(z, restored.sample_latents(&ctx, 1, &mut Rng::seed(3)).unwrap());
}
