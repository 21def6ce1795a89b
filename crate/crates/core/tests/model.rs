use fhdun_core::model::{Ablation, FhdunModel, ForwardOptions, ModelConfig};
use fhdun_core::sampling::{sample, SamplingOperator};
use fhdun_core::scale_space::{scale_gradient, MultiScaleState};
use fhdun_core::tensor::{Shape, Tensor};
use fhdun_core::{fixtures, verify};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(phases: usize, scales: Vec<usize>) -> ModelConfig {
    let widths = vec![4; scales.len()];
    ModelConfig {
        phases,
        scales,
        widths,
        block: 8,
        ratio: 0.25,
        learned_phi: false,
        phi_seed: 3,
        ablation: Ablation::None,
    }
}

fn random_images(rng: &mut ChaCha8Rng, n: usize, size: usize, scale: f64) -> Tensor<f32> {
    let data: Vec<f64> = (0..n * size * size).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64(Shape::new(n, 1, size, size), &data).unwrap()
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn hyperparameters_stay_in_range_over_1000_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = FhdunModel::<f32>::new(small(1, vec![1, 2, 4]), &mut rng).unwrap();
    for draw in 0..1000 {
        if draw % 50 == 0 {
            model = FhdunModel::new(small(1, vec![1, 2, 4]), &mut rng).unwrap();
        }
        // magnitudes up to 1e4 push the activations into saturation
        let scale = 10f64.powf(rng.random_range(-2.0..4.0));
        let a = MultiScaleState::from_image(&random_images(&mut rng, 2, 16, scale), &model.scales()).unwrap();
        let b = MultiScaleState::from_image(&random_images(&mut rng, 2, 16, scale), &model.scales()).unwrap();
        let (u, betas) = model.mbam_forward(0, &a, &b, None).unwrap();
        assert_eq!(betas.len(), 3);
        for beta in &betas {
            assert_eq!(beta.shape(), Shape::new(2, 1, 1, 1));
            assert!(beta.data().iter().all(|&v| (0.0..1.0).contains(&v)), "beta {:?}", beta.data());
        }
        let obs = model.observe(&random_images(&mut rng, 2, 16, 1.0)).unwrap();
        let (_, rhos) = model.agdm_forward(0, &u, &obs, None).unwrap();
        for rho in &rhos {
            assert!(rho.data().iter().all(|&v| v > 0.0 && v.is_finite()), "rho {:?}", rho.data());
        }
    }
}

#[test]
fn hyperparameters_depend_on_content() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = FhdunModel::<f32>::new(small(1, vec![1, 2, 4]), &mut rng).unwrap();
    let mut differ = 0;
    for _ in 0..100 {
        let run = |rng: &mut ChaCha8Rng| {
            let img = random_images(rng, 1, 16, 1.0);
            let obs = model.observe(&img).unwrap();
            let out = model.forward(&obs, &ForwardOptions { phases: Some(1), ..Default::default() }).unwrap();
            let mut v: Vec<f32> = out.betas[0].iter().map(|t| t.data()[0]).collect();
            v.extend(out.rhos[0].iter().map(|t| t.data()[0]));
            v
        };
        if run(&mut rng) != run(&mut rng) {
            differ += 1;
        }
    }
    assert!(differ >= 99, "only {differ} of 100 pairs differ");
}

#[test]
fn reductions() {
    assert!(verify::momentum_independence().unwrap());
    assert!(verify::zero_prox_identity().unwrap());
    let gap = verify::ista_equivalence(5, 0.5).unwrap();
    assert!(gap <= 1e-5, "gap {gap}");
}

#[test]
fn mbam_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = FhdunModel::<f32>::new(small(1, vec![1, 2, 4]), &mut rng).unwrap();
    let x = MultiScaleState::from_image(&random_images(&mut rng, 2, 16, 1.0), &model.scales()).unwrap();
    let (u, betas) = model.mbam_forward(0, &x, &x, None).unwrap();
    for (a, b) in u.entries().iter().zip(x.entries()) {
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(betas.len() * betas[0].numel(), 6);

    let y = MultiScaleState::from_image(&random_images(&mut rng, 2, 16, 1.0), &model.scales()).unwrap();
    let (u, _) = model.mbam_forward(0, &x, &y, Some(0.0)).unwrap();
    for (a, b) in u.entries().iter().zip(x.entries()) {
        assert_eq!(bits(a), bits(b));
    }

    let other = MultiScaleState::from_image(&random_images(&mut rng, 2, 16, 1.0), &[1, 2]).unwrap();
    assert!(model.mbam_forward(0, &x, &other, None).is_err());
    assert!(model.mbam_forward(1, &x, &x, None).is_err());
}

#[test]
fn agdm_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = FhdunModel::<f32>::new(small(1, vec![1, 2, 4]), &mut rng).unwrap();
    let img = Tensor::<f32>::from_f64(Shape::new(1, 1, 16, 16), fixtures::scene(16, 2).data()).unwrap();
    let obs = model.observe(&img).unwrap();

    // the ground truth is measurement-consistent at every branch
    let u = MultiScaleState::from_image(&img, &model.scales()).unwrap();
    let (r, _) = model.agdm_forward(0, &u, &obs, None).unwrap();
    for (a, b) in r.entries().iter().zip(u.entries()) {
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-5);
        }
    }

    let u = MultiScaleState::from_image(&random_images(&mut rng, 1, 16, 1.0), &model.scales()).unwrap();
    let (r, rhos) = model.agdm_forward(0, &u, &obs, Some(0.37)).unwrap();
    for (((got, x), &t), rho) in r.entries().iter().zip(u.entries()).zip(u.scales()).zip(&rhos) {
        assert_eq!(rho.data(), &[0.37f32]);
        assert_eq!(bits(got), bits(&scale_gradient(x, &obs, rho, t).unwrap()));
    }
}

#[test]
fn agdm_with_identity_sampling_is_scaled_adjoint() {
    let n = 64;
    let mut phi = vec![0.0; n * n];
    for i in 0..n {
        phi[i * n + i] = 1.0;
    }
    let op = SamplingOperator::from_matrix(n, 8, phi).unwrap();
    let mut cfg = small(1, vec![1]);
    cfg.ratio = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = FhdunModel::<f32>::new(cfg, &mut rng).unwrap().with_sampling(&op).unwrap();
    let img = random_images(&mut rng, 1, 8, 1.0);
    let obs = model.observe(&img).unwrap();
    let zero = MultiScaleState::new(vec![1], vec![Tensor::zeros(Shape::new(1, 1, 8, 8))]).unwrap();
    let (r, rhos) = model.agdm_forward(0, &zero, &obs, None).unwrap();
    let rho = rhos[0].data()[0];
    for (a, b) in r.entries()[0].data().iter().zip(img.data()) {
        assert!((a - rho * b).abs() < 1e-6);
    }
}

#[test]
fn hpmm_preserves_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = FhdunModel::<f32>::new(ModelConfig::tiny(0.25, 1), &mut rng).unwrap();
    let r = MultiScaleState::from_image(&random_images(&mut rng, 1, 96, 1.0), &model.scales()).unwrap();
    let x = model.hpmm_forward(0, &r).unwrap();
    let shapes: Vec<Shape> = x.entries().iter().map(|e| e.shape()).collect();
    assert_eq!(
        shapes,
        vec![Shape::new(1, 1, 96, 96), Shape::new(1, 4, 48, 48), Shape::new(1, 16, 24, 24)]
    );
}

#[test]
fn reconstruct_geometry_at_ratio_025() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = FhdunModel::<f32>::new(ModelConfig::tiny(0.25, 2), &mut rng).unwrap();
    let y = sample(&fixtures::scene(96, 1), &model.sampling_operator().unwrap()).unwrap();
    assert_eq!((y.geometry.num_blocks(), y.m), (9, 256));
    let rec = model.reconstruct(&y, &ForwardOptions::default()).unwrap();
    assert_eq!((rec.image.width(), rec.image.height()), (96, 96));
    assert_eq!(rec.phase_images.len(), 2);
    assert_eq!(rec.betas.len(), 2);
    assert_eq!(rec.rhos[0].len(), 3);
    let again = model.reconstruct(&y, &ForwardOptions::default()).unwrap();
    assert_eq!(rec.image, again.image);

    let odd = sample(&fixtures::scene(40, 2), &model.sampling_operator().unwrap()).unwrap();
    let rec = model.reconstruct(&odd, &ForwardOptions::default()).unwrap();
    assert_eq!((rec.image.width(), rec.image.height()), (40, 40));
}

#[test]
fn phase_geometry_is_invariant_and_truncation_works() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = FhdunModel::<f32>::new(small(3, vec![1, 2, 4]), &mut rng).unwrap();
    let obs = model.observe(&random_images(&mut rng, 2, 16, 1.0)).unwrap();
    let out = model.forward(&obs, &ForwardOptions::default()).unwrap();
    assert_eq!(out.states.len(), 3);
    for s in &out.states {
        assert!(s.same_geometry(&out.initial));
    }
    let short = model.forward(&obs, &ForwardOptions { phases: Some(2), ..Default::default() }).unwrap();
    assert_eq!(short.states.len(), 2);
    assert_eq!(bits(&short.states[1].entries()[0]), bits(&out.states[1].entries()[0]));
    assert!(model.forward(&obs, &ForwardOptions { phases: Some(4), ..Default::default() }).is_err());
    assert!(model.forward(&obs, &ForwardOptions { phases: Some(0), ..Default::default() }).is_err());
}

#[test]
fn parameters_are_per_phase() {
    let model = FhdunModel::<f32>::new(small(2, vec![1, 2]), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let names: Vec<&str> = model.param_specs().iter().map(|s| s.name.as_str()).collect();
    let p0 = names.iter().filter(|n| n.starts_with("phase0.")).count();
    let p1 = names.iter().filter(|n| n.starts_with("phase1.")).count();
    assert!(p0 > 0 && p0 == p1);
    for sub in ["momentum", "step", "prox"] {
        assert!(names.iter().any(|n| n.starts_with(&format!("phase0.{sub}."))));
    }
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len());
    assert!(!model.param_specs()[0].trainable);
    assert_eq!(model.param_specs()[0].name, "phi");
}

#[test]
fn learned_phi_is_trainable() {
    let mut cfg = small(1, vec![1]);
    cfg.learned_phi = true;
    let model = FhdunModel::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    assert!(model.param_specs()[0].trainable);
    assert!(model.sampling_operator().unwrap().is_learned());
}

#[test]
fn ablations_run_and_change_the_generated_hyperparameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let img = random_images(&mut rng, 2, 16, 1.0);
    for ablation in [Ablation::NoMbam, Ablation::NoAgdm, Ablation::SingleBranch] {
        let mut cfg = small(2, vec![1, 2, 4]);
        cfg.ablation = ablation;
        let model = FhdunModel::<f32>::new(cfg, &mut rng).unwrap();
        let out = model.forward(&model.observe(&img).unwrap(), &ForwardOptions::default()).unwrap();
        match ablation {
            Ablation::SingleBranch => assert_eq!(out.states[0].scales(), &[1]),
            Ablation::NoMbam => {
                assert!(!model.param_specs().iter().any(|s| s.name.starts_with("phase0.momentum.entry")));
                // a learned constant: the same value for every sample
                let b = out.betas[1][0].data();
                assert_eq!(b[0], b[1]);
                assert!((0.0..1.0).contains(&b[0]));
            }
            Ablation::NoAgdm => {
                assert!(!model.param_specs().iter().any(|s| s.name.starts_with("phase0.step.entry")));
                let r = out.rhos[1][2].data();
                assert_eq!(r[0], r[1]);
                assert!(r[0] > 0.0);
            }
            Ablation::None => unreachable!(),
        }
    }
}

#[test]
fn ablation_names_parse() {
    assert_eq!("no-mbam".parse::<Ablation>().unwrap(), Ablation::NoMbam);
    assert_eq!("no-agdm".parse::<Ablation>().unwrap(), Ablation::NoAgdm);
    assert_eq!("single-branch".parse::<Ablation>().unwrap(), Ablation::SingleBranch);
    assert!("fast".parse::<Ablation>().is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut cfg = small(0, vec![1, 2]);
    assert!(FhdunModel::<f32>::new(cfg.clone(), &mut rng).is_err());
    cfg.phases = 1;
    cfg.widths = vec![4];
    assert!(FhdunModel::<f32>::new(cfg.clone(), &mut rng).is_err());
    cfg.widths = vec![4, 4];
    cfg.scales = vec![1, 3];
    assert!(FhdunModel::<f32>::new(cfg, &mut rng).is_err());
}

#[test]
fn observe_rejects_images_off_the_block_grid() {
    let model = FhdunModel::<f32>::new(small(1, vec![1, 2]), &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
    assert!(model.observe(&Tensor::zeros(Shape::new(1, 1, 12, 16))).is_err());
}
