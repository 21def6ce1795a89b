use fhdun_core::checkpoint::Checkpoint;
use fhdun_core::metrics::{psnr, ssim, MetricReport};
use fhdun_core::model::ModelConfig;
use fhdun_core::train::{
    augment, epoch_means, flip_horizontal, multiscale_loss, rotate90, write_loss_csv, DataSource, TrainConfig,
    Trainer,
};
use fhdun_core::{fixtures, verify, Image};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn overfit_config() -> TrainConfig {
    TrainConfig {
        // 500 steps, decayed so Adam settles instead of oscillating at the floor
        epochs: 10,
        iters_per_epoch: 50,
        batch_size: 1,
        patch_size: 32,
        learning_rate: 1e-3,
        lr_decay_epochs: 1,
        lr_decay_factor: 0.7,
        augment: false,
        model: ModelConfig::tiny(0.25, 2),
        data: DataSource::Fixtures { count: 1, size: 32, seed: 5 },
        ..TrainConfig::desk(0.25)
    }
}

fn short_config(steps: usize) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        iters_per_epoch: steps / 2,
        batch_size: 2,
        patch_size: 16,
        model: ModelConfig {
            block: 8,
            ..ModelConfig::tiny(0.25, 2)
        },
        data: DataSource::Fixtures { count: 4, size: 32, seed: 2 },
        ..TrainConfig::desk(0.25)
    }
}

fn sorted_pixels(img: &Image) -> Vec<u64> {
    let mut v: Vec<u64> = img.data().iter().map(|x| x.to_bits()).collect();
    v.sort_unstable();
    v
}

#[test]
fn augmentation_preserves_the_pixel_multiset() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = fixtures::scene(24, 3);
    for _ in 0..50 {
        let out = augment(&img, &mut rng).unwrap();
        assert_eq!(sorted_pixels(&out), sorted_pixels(&img));
    }
}

#[test]
fn augmentation_is_deterministic_per_rng_state() {
    let img = fixtures::scene(16, 4);
    let a: Vec<Image> = {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (0..8).map(|_| augment(&img, &mut rng).unwrap()).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for x in &a {
        assert_eq!(x, &augment(&img, &mut rng).unwrap());
    }
    // all eight dihedral outcomes are reachable
    let mut seen: Vec<Image> = Vec::new();
    for _ in 0..200 {
        let out = augment(&img, &mut rng).unwrap();
        if !seen.contains(&out) {
            seen.push(out);
        }
    }
    assert_eq!(seen.len(), 8);
}

#[test]
fn rotation_and_flip_examples() {
    let img = Image::from_fn(5, 5, |i, j| (i * 5 + j) as f64);
    assert_eq!(rotate90(&rotate90(&img, 2).unwrap(), 2).unwrap(), img);
    assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
    assert_eq!(rotate90(&img, 4).unwrap(), img);
    let wide = Image::zeros(4, 3);
    assert!(rotate90(&wide, 1).is_err());
    assert!(rotate90(&wide, 3).is_err());
    assert!(rotate90(&wide, 2).is_ok());
}

#[test]
fn loss_examples() {
    use fhdun_core::scale_space::MultiScaleState;
    use fhdun_core::tensor::{Shape, Tensor};
    let label = Tensor::<f64>::from_f64(Shape::new(1, 1, 2, 2), &[0.1, 0.2, 0.3, 0.4]).unwrap();
    let exact = MultiScaleState::from_image(&label, &[1, 2]).unwrap();
    let zero = multiscale_loss(&[exact.clone(), exact], &label, 2, &[1, 2]).unwrap();
    assert_eq!(zero.item(), 0.0);

    let off = Tensor::<f64>::from_f64(Shape::new(1, 1, 2, 2), &[0.6, 0.7, 0.8, 0.9]).unwrap();
    let out = MultiScaleState::new(vec![1], vec![off]).unwrap();
    let loss = multiscale_loss(&[out.clone()], &label, 1, &[1]).unwrap();
    assert!((loss.item() - 1.0).abs() < 1e-12);

    assert!(multiscale_loss(&[out.clone()], &label, 2, &[1]).is_err());
    assert!(multiscale_loss(&[out], &label, 1, &[1, 2]).is_err());
    let (ok, detail) = verify::loss_oracle(20).unwrap();
    assert!(ok, "{detail}");
}

#[test]
fn metric_examples() {
    let a = fixtures::scene(32, 1);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), 100.0);
    assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
    let zero = Image::zeros(16, 16);
    let half = Image::from_fn(16, 16, |_, _| 0.5);
    assert!((psnr(&zero, &half, 1.0).unwrap() - 6.0206).abs() < 1e-4);
    let b = fixtures::scene(32, 2);
    assert!((ssim(&a, &b, 1.0).unwrap() - ssim(&b, &a, 1.0).unwrap()).abs() < 1e-9);
    assert!(psnr(&a, &zero, 1.0).is_err());
    assert!(ssim(&a, &zero, 1.0).is_err());

    let report = MetricReport::compute(&a, &b, &[a.clone(), b.clone()]).unwrap();
    assert_eq!(report.phase_psnr, vec![100.0, report.psnr]);
}

#[test]
fn overfit_loss_drops_tenfold() {
    let cfg = overfit_config();
    let data = cfg.data.load().unwrap();
    let mut trainer = Trainer::new(cfg, data).unwrap();
    let log = trainer.run(|_| {}).unwrap();
    assert_eq!(log.len(), 500);
    let first = log[0].loss;
    let last = log.last().unwrap().loss;
    assert!(first >= 10.0 * last, "loss {first} -> {last}");

    let smooth: Vec<f64> = log.windows(10).map(|w| w.iter().map(|r| r.loss).sum::<f64>() / 10.0).collect();
    let violations: Vec<usize> = (50..smooth.len()).filter(|&i| smooth[i] > smooth[i - 1]).collect();
    assert!(violations.is_empty(), "smoothed loss rises at steps {violations:?}");
}

#[test]
fn zero_learning_rate_keeps_weights_bitwise() {
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..short_config(6)
    };
    let data = cfg.data.load().unwrap();
    let mut trainer = Trainer::new(cfg, data).unwrap();
    let before: Vec<Vec<u32>> = trainer
        .model()
        .params()
        .tensors()
        .iter()
        .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
        .collect();
    trainer.run(|_| {}).unwrap();
    let after: Vec<Vec<u32>> = trainer
        .model()
        .params()
        .tensors()
        .iter()
        .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn fixed_seed_gives_identical_curves() {
    let run = || {
        let cfg = short_config(6);
        let data = cfg.data.load().unwrap();
        Trainer::new(cfg, data).unwrap().run(|_| {}).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_reproduces_the_next_step() {
    let cfg = short_config(8);
    let data = cfg.data.load().unwrap();
    let mut full = Trainer::new(cfg.clone(), data.clone()).unwrap();
    let mut first = Trainer::new(cfg.clone(), data.clone()).unwrap();
    for _ in 0..3 {
        full.train_step().unwrap();
        first.train_step().unwrap();
    }
    let ckpt = Checkpoint {
        model: first.model().clone(),
        optimizer: Some(first.optimizer().clone()),
        training: Some(first.progress()),
    };
    let mut bytes = Vec::new();
    ckpt.write_to(&mut bytes).unwrap();
    let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
    let step = back.training.unwrap().step;
    let mut resumed = Trainer::resume(cfg, data, back.model, back.optimizer.unwrap(), step).unwrap();
    for _ in 0..3 {
        let a = full.train_step().unwrap();
        let b = resumed.train_step().unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.step, b.step);
    }
}

#[test]
fn resume_rejects_a_different_model() {
    let cfg = short_config(4);
    let data = cfg.data.load().unwrap();
    let other = Trainer::new(TrainConfig { model: ModelConfig { phases: 1, ..cfg.model.clone() }, ..cfg.clone() }, data.clone()).unwrap();
    let err = Trainer::resume(cfg, data, other.model().clone(), other.optimizer().clone(), 0);
    assert!(err.is_err());
}

#[test]
fn learning_rate_halves_on_schedule() {
    let cfg = TrainConfig::standard(0.25, DataSource::Directory { path: "x".into() });
    assert_eq!(cfg.lr_at(0), 1e-4);
    assert_eq!(cfg.lr_at(29), 1e-4);
    assert_eq!(cfg.lr_at(30), 5e-5);
    assert_eq!(cfg.lr_at(65), 2.5e-5);
    assert_eq!(cfg.total_steps(), 200_000);
    assert_eq!(cfg.adam.beta1, 0.9);
}

#[test]
fn config_json_round_trips_and_rejects_unknown_keys() {
    let cfg = TrainConfig::desk(0.1);
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["momentum"] = serde_json::json!(0.9);
    assert!(TrainConfig::from_json(&value.to_string()).is_err());
    let bad = TrainConfig { patch_size: 20, ..cfg };
    assert!(TrainConfig::from_json(&serde_json::to_string(&bad).unwrap()).is_err());
}

#[test]
fn empty_data_is_rejected() {
    assert!(Trainer::new(short_config(2), Vec::new()).is_err());
}

#[test]
fn loss_csv_and_epoch_means() {
    let cfg = short_config(4);
    let data = cfg.data.load().unwrap();
    let log = Trainer::new(cfg, data).unwrap().run(|_| {}).unwrap();
    let means = epoch_means(&log);
    assert_eq!(means.len(), 2);
    assert!((means[0].1 - (log[0].loss + log[1].loss) / 2.0).abs() < 1e-12);
    let mut out = Vec::new();
    write_loss_csv(&mut out, &log).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.starts_with("epoch,step,loss,lr\n0,0,"));
}
