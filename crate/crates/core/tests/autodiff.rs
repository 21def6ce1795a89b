use fhdun_core::model::{Ablation, FhdunModel, ModelConfig};
use fhdun_core::tensor::gradcheck::{check_gradients, GradCheckOptions};
use fhdun_core::tensor::{self, ConvParams, Shape, Tensor};
use fhdun_core::verify;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: Shape) -> Vec<f64> {
    (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn t32(shape: Shape, data: &[f64]) -> Tensor<f32> {
    Tensor::from_f64(shape, data).unwrap()
}

/// Cross-correlation by direct summation, zero padding, any stride.
fn naive_conv(x: &[f64], xs: Shape, w: &[f64], ws: Shape, b: &[f64], stride: usize, pad: usize) -> (Vec<f64>, Shape) {
    let k = ws.h;
    let oh = (xs.h + 2 * pad - k) / stride + 1;
    let ow = (xs.w + 2 * pad - k) / stride + 1;
    let os = Shape::new(xs.n, ws.n, oh, ow);
    let mut out = vec![0.0; os.numel()];
    for n in 0..xs.n {
        for o in 0..ws.n {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b[o];
                    for c in 0..xs.c {
                        for i in 0..k {
                            for j in 0..k {
                                let yy = (y * stride + i) as isize - pad as isize;
                                let xx = (xo * stride + j) as isize - pad as isize;
                                if yy < 0 || xx < 0 || yy >= xs.h as isize || xx >= xs.w as isize {
                                    continue;
                                }
                                let xv = x[((n * xs.c + c) * xs.h + yy as usize) * xs.w + xx as usize];
                                acc += xv * w[((o * ws.c + c) * k + i) * k + j];
                            }
                        }
                    }
                    out[((n * ws.n + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    (out, os)
}

#[test]
fn conv2d_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (xs, ws, stride, pad) in [
        (Shape::new(2, 3, 8, 8), Shape::new(4, 3, 3, 3), 1, 1),
        (Shape::new(1, 2, 6, 6), Shape::new(3, 2, 3, 3), 2, 1),
        (Shape::new(2, 3, 5, 7), Shape::new(2, 3, 1, 1), 1, 0),
        (Shape::new(1, 1, 5, 5), Shape::new(2, 1, 3, 3), 1, 0),
    ] {
        let x = random(&mut rng, xs);
        let w = random(&mut rng, ws);
        let b = random(&mut rng, Shape::new(1, ws.n, 1, 1));
        let (want, os) = naive_conv(&x, xs, &w, ws, &b, stride, pad);
        let params = ConvParams::new(
            Tensor::<f64>::from_f64(ws, &w).unwrap(),
            Tensor::from_f64(Shape::new(1, ws.n, 1, 1), &b).unwrap(),
            stride,
            pad,
        )
        .unwrap();
        let got = tensor::conv2d(&Tensor::from_f64(xs, &x).unwrap(), &params).unwrap();
        assert_eq!(got.shape(), os);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}

#[test]
fn conv2d_identity_kernel_and_bias_only() {
    let x = t32(Shape::new(1, 1, 3, 3), &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
    let id = ConvParams::new(t32(Shape::new(1, 1, 1, 1), &[1.0]), Tensor::zeros(Shape::new(1, 1, 1, 1)), 1, 0).unwrap();
    assert_eq!(tensor::conv2d(&x, &id).unwrap().data(), x.data());

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = t32(Shape::new(2, 1, 3, 3), &random(&mut rng, Shape::new(2, 1, 3, 3)));
    let b = t32(Shape::new(1, 2, 1, 1), &[0.25, -1.5]);
    let out = tensor::conv2d(&Tensor::zeros(Shape::new(1, 1, 4, 4)), &ConvParams::new(w, b, 1, 1).unwrap()).unwrap();
    assert!(out.data()[..16].iter().all(|&v| v == 0.25));
    assert!(out.data()[16..].iter().all(|&v| v == -1.5));
}

#[test]
fn conv2d_is_linear_without_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xs = Shape::new(2, 3, 6, 6);
    let ws = Shape::new(4, 3, 3, 3);
    let params = ConvParams::new(t32(ws, &random(&mut rng, ws)), Tensor::zeros(Shape::new(1, 4, 1, 1)), 1, 1).unwrap();
    let x = t32(xs, &random(&mut rng, xs));
    let y = t32(xs, &random(&mut rng, xs));
    let (a, b) = (0.7f32, -1.3f32);
    let combo = tensor::add(&tensor::scale(&x, a), &tensor::scale(&y, b)).unwrap();
    let lhs = tensor::conv2d(&combo, &params).unwrap();
    let cx = tensor::conv2d(&x, &params).unwrap();
    let cy = tensor::conv2d(&y, &params).unwrap();
    let rhs = tensor::add(&tensor::scale(&cx, a), &tensor::scale(&cy, b)).unwrap();
    for (l, r) in lhs.data().iter().zip(rhs.data()) {
        assert!((l - r).abs() < 1e-5);
    }
}

#[test]
fn conv2d_rejects_mismatched_channels() {
    let params = ConvParams::new(
        Tensor::<f32>::zeros(Shape::new(2, 3, 3, 3)),
        Tensor::zeros(Shape::new(1, 2, 1, 1)),
        1,
        1,
    )
    .unwrap();
    let err = tensor::conv2d(&Tensor::zeros(Shape::new(1, 2, 4, 4)), &params).unwrap_err();
    assert!(err.to_string().contains('3'), "{err}");
    assert!(ConvParams::new(Tensor::<f32>::zeros(Shape::new(2, 3, 5, 5)), Tensor::zeros(Shape::new(1, 2, 1, 1)), 1, 2).is_err());
}

#[test]
fn relu_examples() {
    let x = t32(Shape::new(1, 1, 1, 3), &[-1.0, 0.0, 2.0]);
    assert_eq!(tensor::relu(&x).data(), &[0.0, 0.0, 2.0]);

    let neg = t32(Shape::new(1, 1, 2, 2), &[-1.0, -2.0, -0.5, -3.0]).into_param();
    tensor::sum(&tensor::relu(&neg)).backward().unwrap();
    assert_eq!(neg.grad().unwrap(), vec![0.0; 4]);

    // subgradient at zero is zero
    let zero = Tensor::<f32>::zeros(Shape::new(1, 1, 1, 1)).into_param();
    tensor::sum(&tensor::relu(&zero)).backward().unwrap();
    assert_eq!(zero.grad().unwrap(), vec![0.0]);
}

#[test]
fn elementary_backward_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = Shape::new(2, 2, 3, 3);
    let data = random(&mut rng, s);
    let x = t32(s, &data).into_param();
    tensor::sum(&x).backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; s.numel()]);

    let x = t32(s, &data).into_param();
    tensor::sum_squares(&x).backward().unwrap();
    for (g, v) in x.grad().unwrap().iter().zip(x.data()) {
        assert_eq!(*g, 2.0 * v);
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let x = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2)).into_param();
    assert!(tensor::relu(&x).backward().is_err());
}

#[test]
fn independent_graphs_do_not_interact() {
    let a = t32(Shape::new(1, 1, 1, 2), &[1.0, 2.0]).into_param();
    let b = t32(Shape::new(1, 1, 1, 2), &[3.0, 4.0]).into_param();
    let la = tensor::sum_squares(&a);
    let lb = tensor::sum(&b);
    la.backward().unwrap();
    assert!(b.grad().is_none() || b.grad().unwrap().iter().all(|&g| g == 0.0));
    lb.backward().unwrap();
    assert_eq!(a.grad().unwrap(), vec![2.0, 4.0]);
    assert_eq!(b.grad().unwrap(), vec![1.0, 1.0]);
}

#[test]
fn shape_helpers() {
    let a = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4));
    let b = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
    assert_eq!(tensor::concat_channels(&[&a, &b]).unwrap().shape(), Shape::new(1, 5, 4, 4));
    assert!(tensor::concat_channels(&[&a, &Tensor::zeros(Shape::new(1, 3, 2, 4))]).is_err());
    assert!(tensor::add(&a, &b).is_err());
    let c = Tensor::full(Shape::new(2, 3, 5, 5), 0.75f32);
    assert!(tensor::global_avg_pool(&c).data().iter().all(|&v| (v - 0.75).abs() < 1e-7));
    assert_eq!(tensor::add(&a, &Tensor::zeros(a.shape())).unwrap().data(), a.data());

    let w = Tensor::<f32>::zeros(Shape::new(5, 2, 3, 3));
    let p = ConvParams::new(w, Tensor::zeros(Shape::new(1, 5, 1, 1)), 2, 1).unwrap();
    let x = Tensor::<f32>::zeros(Shape::new(1, 2, 8, 8));
    assert_eq!(tensor::downsample2(&x, &p).unwrap().shape(), Shape::new(1, 5, 4, 4));
    assert!(tensor::downsample2(&Tensor::zeros(Shape::new(1, 2, 7, 8)), &p).is_err());
    let p = ConvParams::new(Tensor::<f32>::zeros(Shape::new(5, 2, 3, 3)), Tensor::zeros(Shape::new(1, 5, 1, 1)), 1, 1).unwrap();
    assert_eq!(tensor::upsample2(&Tensor::zeros(Shape::new(1, 2, 4, 4)), &p).unwrap().shape(), Shape::new(1, 5, 8, 8));
    let k = Tensor::full(Shape::new(1, 2, 3, 3), 0.3f32);
    assert!(tensor::nearest_upsample2(&k).data().iter().all(|&v| v == 0.3));
}

#[test]
fn every_op_passes_finite_differences() {
    for (name, report) in verify::op_gradients().unwrap() {
        assert!(
            report.max_rel_error < 1e-3,
            "{name}: relative error {} at {}[{}] (analytic {}, numeric {})",
            report.max_rel_error,
            report.worst_param,
            report.worst_index,
            report.analytic,
            report.numeric
        );
    }
}

#[test]
fn down_up_composition_gradient_at_64_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shapes = [
        Shape::new(1, 2, 8, 8),
        Shape::new(3, 2, 3, 3),
        Shape::new(1, 3, 1, 1),
        Shape::new(2, 3, 3, 3),
        Shape::new(1, 2, 1, 1),
    ];
    let params: Vec<(String, Tensor<f64>)> = shapes
        .iter()
        .enumerate()
        .map(|(i, &s)| (format!("p{i}"), Tensor::from_f64(s, &random(&mut rng, s)).unwrap()))
        .collect();
    let loss = |p: &[Tensor<f64>]| {
        let down = tensor::downsample2(&p[0], &ConvParams::new(p[1].clone(), p[2].clone(), 2, 1)?)?;
        let up = tensor::upsample2(&tensor::relu(&down), &ConvParams::new(p[3].clone(), p[4].clone(), 1, 1)?)?;
        Ok(tensor::sum_squares(&tensor::sub(&up, &p[0])?))
    };
    let opts = GradCheckOptions {
        step: 1e-5,
        ..Default::default()
    };
    let r = check_gradients(&params, loss, &opts, &mut rng).unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

fn tiny(phases: usize, scales: Vec<usize>, widths: Vec<usize>) -> ModelConfig {
    ModelConfig {
        phases,
        scales,
        widths,
        block: 8,
        ratio: 0.25,
        learned_phi: false,
        phi_seed: 9,
        ablation: Ablation::None,
    }
}

#[test]
fn one_phase_gradient_at_32_bit() {
    let r = verify::phase_gradient().unwrap();
    assert!(r.max_rel_error < 1e-2, "{r:?}");
}

#[test]
fn two_phase_model_gradient_at_32_bit() {
    let r = verify::model_gradient(tiny(2, vec![1, 2], vec![4, 8]), 16, 2, 31).unwrap();
    assert!(r.max_rel_error < 1e-2, "{r:?}");
}

#[test]
fn hpmm_gradient_on_32x32_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = FhdunModel::<f32>::new(tiny(1, vec![1, 2, 4], vec![4, 4, 4]), &mut rng).unwrap();
    let prox: Vec<usize> = (0..model.param_specs().len())
        .filter(|&i| model.param_specs()[i].name.starts_with("phase0.prox"))
        .collect();
    let params: Vec<(String, Tensor<f32>)> = prox
        .iter()
        .map(|&i| (model.param_specs()[i].name.clone(), model.params().tensors()[i].clone()))
        .collect();
    let input = Tensor::<f64>::from_f64(Shape::new(1, 1, 32, 32), &random(&mut rng, Shape::new(1, 1, 32, 32))).unwrap();
    let wide = model.cast::<f64>();

    fn loss<T: fhdun_core::tensor::Real>(
        m: &FhdunModel<T>,
        idx: &[usize],
        p: &[Tensor<T>],
        input: &Tensor<T>,
    ) -> fhdun_core::Result<Tensor<T>> {
        let mut all = m.params().tensors().to_vec();
        for (&i, t) in idx.iter().zip(p) {
            all[i] = t.clone();
        }
        let m = m.with_params(m.params().with_tensors(all)?)?;
        let r = fhdun_core::scale_space::MultiScaleState::from_image(input, &m.scales())?;
        let x = m.hpmm_forward(0, &r)?;
        let mut total = tensor::sum_squares(&x.entries()[0]);
        for e in &x.entries()[1..] {
            total = tensor::add(&total, &tensor::sum_squares(e))?;
        }
        Ok(total)
    }
    let input32 = Tensor::<f32>::from_f64(input.shape(), input.data()).unwrap();
    let opts = GradCheckOptions {
        step: 1e-6,
        samples_per_param: Some(2),
        denom_floor: 1e-2,
    };
    let r = fhdun_core::tensor::gradcheck::check_gradients_f32(
        &params,
        |p| loss(&model, &prox, p, &input32),
        |p| loss(&wide, &prox, p, &input),
        &opts,
        &mut rng,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-2, "{r:?}");
}

#[test]
fn one_phase_gradient_at_64_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = FhdunModel::<f64>::new(tiny(1, vec![1, 2], vec![4, 4]), &mut rng).unwrap();
    let images = Tensor::<f64>::from_f64(Shape::new(1, 1, 16, 16), fhdun_core::fixtures::scene(16, 3).data()).unwrap();
    let idx: Vec<usize> = (0..model.param_specs().len())
        .filter(|&i| model.param_specs()[i].trainable)
        .collect();
    let params: Vec<(String, Tensor<f64>)> = idx
        .iter()
        .map(|&i| (model.param_specs()[i].name.clone(), model.params().tensors()[i].clone()))
        .collect();
    let loss = |p: &[Tensor<f64>]| {
        let mut all = model.params().tensors().to_vec();
        for (&i, t) in idx.iter().zip(p) {
            all[i] = t.clone();
        }
        let m = model.with_params(model.params().with_tensors(all)?)?;
        let out = m.forward(&m.observe(&images)?, &Default::default())?;
        fhdun_core::train::multiscale_loss(&out.states, &images, 1, &m.scales())
    };
    let opts = GradCheckOptions {
        step: 1e-6,
        samples_per_param: Some(2),
        denom_floor: 1e-4,
    };
    let r = check_gradients(&params, loss, &opts, &mut rng).unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn graph_replay_is_bitwise_deterministic() {
    let cfg = tiny(2, vec![1, 2], vec![4, 4]);
    let run = || {
        let model = FhdunModel::<f32>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let images = Tensor::<f32>::from_f64(Shape::new(1, 1, 16, 16), fhdun_core::fixtures::scene(16, 1).data()).unwrap();
        let out = model.forward(&model.observe(&images).unwrap(), &Default::default()).unwrap();
        out.x_hat.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
