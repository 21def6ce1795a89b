//! Self-check battery: momentum table, adjoint identities, round trips,
//! gradient checks and the algebraic reductions of the unfolded network.
//! Every check is small enough to run in a few seconds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::fixtures;
use crate::model::{Ablation, FhdunModel, ForwardOptions, ModelConfig};
use crate::sampling::{dot, sample, BlockGeometry, Measurement, SamplingOperator};
use crate::scale_space::MultiScaleState;
use crate::solvers::{
    fista_momentum, fista_solve, ista_solve, soft_threshold_scalar, InitialGuess, SolverConfig, Transform,
};
use crate::tensor::gradcheck::{check_gradients_f32, GradCheckOptions, GradCheckReport};
use crate::tensor::{self, ConvParams, Real, Shape, Tensor};
use crate::train::multiscale_loss;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn from(name: &'static str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => CheckResult { name, passed, detail },
            Err(e) => CheckResult {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        }
    }
}

/// Runs every check.
pub fn run_all() -> Vec<CheckResult> {
    let checks: [(&'static str, fn() -> Result<(bool, String)>); 12] = [
        ("momentum schedule", momentum_table),
        ("soft threshold is the l1 prox", soft_threshold_prox),
        ("fista accelerates ista", || acceleration(5)),
        ("sampling adjoint", sampling_adjoint),
        ("unshuffle bijection", || unshuffle_bijection(100)),
        ("autodiff op gradients", op_gradients_summary),
        ("phase gradient", phase_gradient_summary),
        ("unfolding reductions", reductions),
        ("loss oracle", || loss_oracle(20)),
        ("measurement round trip", measurement_round_trip),
        ("checkpoint round trip", checkpoint_round_trip),
        ("image round trip", image_round_trip),
    ];
    checks.iter().map(|(name, f)| CheckResult::from(name, f())).collect()
}

/// `t¹`, `t²` against their closed forms, then `β < 1`, `β` increasing and
/// `t_k ≥ (k+1)/2` along the schedule.
pub fn momentum_table() -> Result<(bool, String)> {
    let (t1, b1) = fista_momentum(1.0)?;
    let (t2, b2) = fista_momentum(t1)?;
    let mut ok = (t1 - 1.61803).abs() <= 1e-5 && (t2 - 2.19353).abs() <= 1e-5 && b1 == 0.0;
    let (mut t, mut prev_beta) = (t2, b2);
    for k in 3..=10_000usize {
        let (next, beta) = fista_momentum(t)?;
        if k <= 100 && next < (k as f64 + 1.0) / 2.0 {
            ok = false;
        }
        if beta >= 1.0 || beta <= prev_beta {
            ok = false;
        }
        t = next;
        prev_beta = beta;
    }
    Ok((ok, format!("t1 = {t1:.6}, t2 = {t2:.6}, beta at 10^4 = {prev_beta:.6}")))
}

/// Soft thresholding against a brute-force minimizer on a 1e-4 grid.
pub fn soft_threshold_prox() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let v: f64 = rng.random_range(-2.0..2.0);
        let theta: f64 = rng.random_range(0.0..1.0);
        let (mut best, mut best_z) = (f64::INFINITY, 0.0);
        for i in -30_000..=30_000 {
            let z = i as f64 * 1e-4;
            let f = 0.5 * (z - v) * (z - v) + theta * z.abs();
            if f < best {
                best = f;
                best_z = z;
            }
        }
        worst = worst.max((soft_threshold_scalar(v, theta) - best_z).abs());
    }
    Ok((worst <= 1e-4, format!("max deviation from grid minimizer {worst:.1e}")))
}

/// Iterations ISTA and FISTA need to come within `1e-6` of the better of
/// their two final objectives, on one seeded 8-sparse problem with N = 64.
pub fn acceleration_case(seed: u64) -> Result<(Option<usize>, Option<usize>)> {
    let p = fixtures::sparse_problem(8, 32, 8, seed)?;
    let cfg = SolverConfig {
        lambda: 0.01,
        rho: 1.0,
        max_iters: 20_000,
        tol: 1e-13,
        transform: Transform::Identity,
        init: InitialGuess::Zeros,
    };
    let ista = ista_solve(&p.y, &p.op, &cfg)?;
    let fista = fista_solve(&p.y, &p.op, &cfg)?;
    let f_star = ista.final_objective().min(fista.final_objective());
    Ok((ista.iterations_to_reach(f_star, 1e-6), fista.iterations_to_reach(f_star, 1e-6)))
}

pub fn acceleration(seeds: u64) -> Result<(bool, String)> {
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in 0..seeds {
        let (ni, nf) = acceleration_case(seed)?;
        ok &= matches!((ni, nf), (Some(i), Some(f)) if 2 * f <= i);
        let show = |n: Option<usize>| n.map_or("-".to_string(), |n| n.to_string());
        parts.push(format!("{}/{}", show(nf), show(ni)));
    }
    Ok((ok, format!("fista/ista iterations {}", parts.join(", "))))
}

/// Adjoint gap and row orthonormality for every tabulated ratio.
pub fn sampling_adjoint() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst_adj: f64 = 0.0;
    let mut worst_orth: f64 = 0.0;
    for (i, ratio) in [0.01, 0.10, 0.25, 0.30, 0.40].into_iter().enumerate() {
        let op = SamplingOperator::for_ratio(ratio, 32, i as u64)?;
        let (m, n) = (op.m(), op.n());
        for _ in 0..5 {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let gap = (dot(&op.apply(&x), &y) - dot(&x, &op.apply_t(&y))).abs();
            worst_adj = worst_adj.max(gap / (dot(&x, &x) * dot(&y, &y)).sqrt());
        }
        let phi = op.matrix();
        for a in 0..m {
            for b in 0..m {
                let g = dot(&phi[a * n..(a + 1) * n], &phi[b * n..(b + 1) * n]);
                let target = if a == b { 1.0 } else { 0.0 };
                worst_orth = worst_orth.max((g - target).abs());
            }
        }
    }
    Ok((
        worst_adj <= 1e-5 && worst_orth <= 1e-5,
        format!("relative adjoint gap {worst_adj:.1e}, max |PhiPhi^T - I| {worst_orth:.1e}"),
    ))
}

pub fn unshuffle_bijection(count: usize) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut exact = true;
    let mut worst: f64 = 0.0;
    let shape = Shape::new(1, 1, 16, 16);
    for _ in 0..count {
        let a = random_tensor::<f64>(&mut rng, shape);
        let b = random_tensor::<f64>(&mut rng, shape);
        for t in [1, 2, 4] {
            let ua = tensor::unshuffle(&a, t)?;
            exact &= tensor::unshuffle_inv(&ua, t)?.data() == a.data();
            let ub = tensor::unshuffle(&b, t)?;
            worst = worst.max((dot(ua.data(), ub.data()) - dot(a.data(), b.data())).abs());
        }
    }
    Ok((
        exact && worst <= 1e-6,
        format!("exact inverse: {exact}, inner-product gap {worst:.1e}"),
    ))
}

fn random_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<T> {
    let data: Vec<f64> = (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, &data).expect("sized")
}

/// Fixed weights so that reducing to a scalar does not cancel symmetrically.
fn weighted_sum<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let w: Vec<f64> = (0..a.numel()).map(|i| (0.7 * i as f64 + 0.3).sin()).collect();
    Ok(tensor::sum(&tensor::mul(a, &Tensor::from_f64(a.shape(), &w)?)?))
}

fn test_geometry() -> BlockGeometry {
    BlockGeometry::new(8, 8, 4).expect("valid geometry")
}

/// One scalar-valued graph per differentiable op.
fn op_case<T: Real>(name: &str, p: &[Tensor<T>]) -> Result<Tensor<T>> {
    let c = |v: f64| T::from_f64(v);
    let conv = |stride, padding| ConvParams::new(p[1].clone(), p[2].clone(), stride, padding);
    let out = match name {
        "add" => tensor::add(&p[0], &p[1])?,
        "sub" => tensor::sub(&p[0], &p[1])?,
        "mul" => tensor::mul(&p[0], &p[1])?,
        "scale" => tensor::scale(&p[0], c(1.7)),
        "add_scalar" => tensor::mul(&tensor::add_scalar(&p[0], c(0.4)), &p[0])?,
        "relu" => tensor::relu(&p[0]),
        "sigmoid" => tensor::sigmoid(&p[0]),
        "softplus" => tensor::softplus(&p[0]),
        "sum" => {
            let s = tensor::sum(&p[0]);
            tensor::mul(&s, &s)?
        }
        "sum_squares" => tensor::sum_squares(&p[0]),
        "concat_channels" => tensor::concat_channels(&[&p[0], &p[1]])?,
        "global_avg_pool" => tensor::global_avg_pool(&p[0]),
        "nearest_upsample2" => tensor::nearest_upsample2(&p[0]),
        "conv2d_3x3" => tensor::conv2d(&p[0], &conv(1, 1)?)?,
        "conv2d_1x1" => tensor::conv2d(&p[0], &conv(1, 0)?)?,
        "downsample2" => tensor::downsample2(&p[0], &conv(2, 1)?)?,
        "upsample2" => tensor::upsample2(&p[0], &conv(1, 1)?)?,
        "unshuffle" => tensor::unshuffle(&p[0], 2)?,
        "unshuffle_inv" => tensor::unshuffle_inv(&p[0], 2)?,
        "scale_per_sample" => tensor::scale_per_sample(&p[0], &p[1])?,
        "repeat_batch" => tensor::repeat_batch(&p[0], 3)?,
        "block_sample" => tensor::block_sample(&p[0], &p[1], &test_geometry())?,
        "block_adjoint" => tensor::block_adjoint(&p[0], &p[1], &test_geometry())?,
        other => return Err(Error::invalid(format!("unknown op case {other}"))),
    };
    weighted_sum(&out)
}

/// Every op case with the shapes of its inputs.
pub const OP_CASES: &[(&str, &[[usize; 4]])] = &[
    ("add", &[[2, 2, 3, 3], [2, 2, 3, 3]]),
    ("sub", &[[2, 2, 3, 3], [2, 2, 3, 3]]),
    ("mul", &[[2, 2, 3, 3], [2, 2, 3, 3]]),
    ("scale", &[[2, 2, 3, 3]]),
    ("add_scalar", &[[2, 2, 3, 3]]),
    ("relu", &[[2, 2, 3, 3]]),
    ("sigmoid", &[[2, 2, 3, 3]]),
    ("softplus", &[[2, 2, 3, 3]]),
    ("sum", &[[2, 2, 3, 3]]),
    ("sum_squares", &[[2, 2, 3, 3]]),
    ("concat_channels", &[[2, 1, 3, 3], [2, 2, 3, 3]]),
    ("global_avg_pool", &[[2, 3, 4, 4]]),
    ("nearest_upsample2", &[[1, 2, 3, 3]]),
    ("conv2d_3x3", &[[2, 2, 5, 5], [3, 2, 3, 3], [1, 3, 1, 1]]),
    ("conv2d_1x1", &[[2, 2, 4, 4], [3, 2, 1, 1], [1, 3, 1, 1]]),
    ("downsample2", &[[1, 2, 6, 6], [3, 2, 3, 3], [1, 3, 1, 1]]),
    ("upsample2", &[[1, 2, 3, 3], [3, 2, 3, 3], [1, 3, 1, 1]]),
    ("unshuffle", &[[2, 1, 4, 4]]),
    ("unshuffle_inv", &[[2, 4, 2, 2]]),
    ("scale_per_sample", &[[2, 2, 3, 3], [2, 1, 1, 1]]),
    ("repeat_batch", &[[1, 2, 3, 3]]),
    ("block_sample", &[[2, 1, 8, 8], [1, 1, 4, 16]]),
    ("block_adjoint", &[[2, 1, 4, 4], [1, 1, 4, 16]]),
];

/// Finite-difference report for every op case, with `f32` analytic gradients.
pub fn op_gradients() -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let opts = GradCheckOptions {
        step: 1e-6,
        ..Default::default()
    };
    OP_CASES
        .iter()
        .map(|&(name, shapes)| {
            let params: Vec<(String, Tensor<f32>)> = shapes
                .iter()
                .enumerate()
                .map(|(i, &[n, c, h, w])| (format!("{name}.{i}"), random_tensor(&mut rng, Shape::new(n, c, h, w))))
                .collect();
            let report = check_gradients_f32(
                &params,
                |p| op_case::<f32>(name, p),
                |p| op_case::<f64>(name, p),
                &opts,
                &mut rng,
            )?;
            Ok((name, report))
        })
        .collect()
}

fn op_gradients_summary() -> Result<(bool, String)> {
    let reports = op_gradients()?;
    let (worst_name, worst) = reports
        .iter()
        .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
        .expect("non-empty");
    Ok((
        reports.iter().all(|(_, r)| r.max_rel_error < 1e-2),
        format!("{} ops, worst {worst_name} at {:.1e}", reports.len(), worst.max_rel_error),
    ))
}

fn small_config(phases: usize, scales: Vec<usize>, widths: Vec<usize>) -> ModelConfig {
    ModelConfig {
        phases,
        scales,
        widths,
        block: 8,
        ratio: 0.25,
        learned_phi: false,
        phi_seed: 5,
        ablation: Ablation::None,
    }
}

fn model_loss<T: Real>(
    model: &FhdunModel<T>,
    trainable: &[usize],
    p: &[Tensor<T>],
    images: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut all = model.params().tensors().to_vec();
    for (&i, t) in trainable.iter().zip(p) {
        all[i] = t.clone();
    }
    let m = model.with_params(model.params().with_tensors(all)?)?;
    let obs = m.observe(images)?;
    let out = m.forward(&obs, &ForwardOptions::default())?;
    multiscale_loss(&out.states, images, out.states.len(), &m.scales())
}

/// End-to-end gradient check of the multi-scale loss through a randomly
/// initialized model on one `size x size` fixture image, probing up to
/// `samples` coordinates of every trainable tensor.
pub fn model_gradient(config: ModelConfig, size: usize, samples: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = FhdunModel::<f32>::new(config, &mut rng)?;
    let wide = model.cast::<f64>();
    let image = fixtures::scene(size, seed);
    let shape = Shape::new(1, 1, size, size);
    let images32 = Tensor::<f32>::from_f64(shape, image.data())?;
    let images64 = Tensor::<f64>::from_f64(shape, image.data())?;
    let trainable: Vec<usize> = (0..model.param_specs().len())
        .filter(|&i| model.param_specs()[i].trainable)
        .collect();
    let params: Vec<(String, Tensor<f32>)> = trainable
        .iter()
        .map(|&i| (model.param_specs()[i].name.clone(), model.params().tensors()[i].clone()))
        .collect();
    let opts = GradCheckOptions {
        step: 1e-6,
        samples_per_param: Some(samples),
        denom_floor: 1e-2,
    };
    check_gradients_f32(
        &params,
        |p| model_loss(&model, &trainable, p, &images32),
        |p| model_loss(&wide, &trainable, p, &images64),
        &opts,
        &mut rng,
    )
}

/// One full phase, K = 1 and T = {1, 2}, on a 16 x 16 image.
pub fn phase_gradient() -> Result<GradCheckReport> {
    model_gradient(small_config(1, vec![1, 2], vec![4, 4]), 16, 3, 16)
}

fn phase_gradient_summary() -> Result<(bool, String)> {
    let r = phase_gradient()?;
    Ok((
        r.max_rel_error < 1e-2,
        format!(
            "{} coordinates, worst {} at {:.1e} (analytic {:.4e}, numeric {:.4e})",
            r.checked, r.worst_param, r.max_rel_error, r.analytic, r.numeric
        ),
    ))
}

/// (a) with `B = 0` a phase ignores `X⁽ᵏ⁻²⁾` bit for bit; (b) an all-zero
/// proximal network is the identity; (c) with a fixed step, no momentum, no
/// prox and T = {1} the network is gradient descent and tracks `ista_solve`
/// with λ = 0 iteration by iteration.
pub fn reductions() -> Result<(bool, String)> {
    let (a, b) = (momentum_independence()?, zero_prox_identity()?);
    let c = ista_equivalence(4, 0.5)?;
    Ok((
        a && b && c <= 1e-5,
        format!("B = 0 independence: {a}, zero prox identity: {b}, max gap to ISTA {c:.1e}"),
    ))
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

pub fn momentum_independence() -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let model = FhdunModel::<f32>::new(small_config(1, vec![1, 2], vec![4, 4]), &mut rng)?;
    let images = Tensor::<f32>::from_f64(Shape::new(1, 1, 16, 16), fixtures::scene(16, 6).data())?;
    let obs = model.observe(&images)?;
    let x0 = MultiScaleState::from_image(&obs.back_projection()?, &model.scales())?;
    let other = MultiScaleState::from_image(&random_tensor(&mut rng, Shape::new(1, 1, 16, 16)), &model.scales())?;
    let phase = |xpp: &MultiScaleState<f32>| -> Result<MultiScaleState<f32>> {
        let (u, _) = model.mbam_forward(0, &x0, xpp, Some(0.0))?;
        let (r, _) = model.agdm_forward(0, &u, &obs, None)?;
        model.hpmm_forward(0, &r)
    };
    let (p, q) = (phase(&x0)?, phase(&other)?);
    Ok(p.entries().iter().zip(q.entries()).all(|(a, b)| bits(a) == bits(b)))
}

pub fn zero_prox_identity() -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let model = FhdunModel::<f32>::zeros(small_config(1, vec![1, 2, 4], vec![4, 4, 4]))?;
    let r = MultiScaleState::from_image(&random_tensor(&mut rng, Shape::new(2, 1, 16, 16)), &model.scales())?;
    let x = model.hpmm_forward(0, &r)?;
    Ok(x.entries().iter().zip(r.entries()).all(|(a, b)| bits(a) == bits(b)))
}

/// Largest pixel gap between the reduced network after each of `phases`
/// phases and ISTA after as many iterations, with a Gaussian Φ whose rows
/// are not orthonormal.
pub fn ista_equivalence(phases: usize, rho: f64) -> Result<f64> {
    let block = 8;
    let (m, n) = (16, block * block);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let phi: Vec<f64> = (0..m * n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z / (n as f64).sqrt()
        })
        .collect();
    let op = SamplingOperator::from_matrix(m, block, phi)?;
    let config = ModelConfig {
        phases,
        scales: vec![1],
        widths: vec![4],
        block,
        ratio: m as f64 / n as f64,
        learned_phi: false,
        phi_seed: 0,
        ablation: Ablation::None,
    };
    let model = FhdunModel::<f32>::zeros(config)?.with_sampling(&op)?;
    let y = sample(&fixtures::scene(20, 7), &op)?;
    let opts = ForwardOptions {
        phases: None,
        beta: Some(0.0),
        rho: Some(rho),
        identity_prox: true,
    };
    let rec = model.reconstruct(&y, &opts)?;
    let mut worst: f64 = 0.0;
    for (k, got) in rec.phase_images.iter().enumerate() {
        let cfg = SolverConfig {
            lambda: 0.0,
            rho,
            max_iters: k + 1,
            tol: 0.0,
            transform: Transform::Identity,
            init: InitialGuess::BackProjection,
        };
        let want = ista_solve(&y, &op, &cfg)?.image;
        for (a, b) in got.data().iter().zip(want.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// The multi-scale loss as an explicit sum over phases, branches and
/// pixels, reading the full-resolution label directly.
pub fn brute_force_loss(outputs: &[MultiScaleState<f64>], labels: &Tensor<f64>) -> f64 {
    let l = labels.shape();
    let mut total = 0.0;
    for state in outputs {
        for (&t, x) in state.scales().iter().zip(state.entries()) {
            let s = x.shape();
            let d = x.data();
            for b in 0..s.n {
                for c in 0..s.c {
                    let (i, j) = (c / t, c % t);
                    for yy in 0..s.h {
                        for xx in 0..s.w {
                            let v = d[((b * s.c + c) * s.h + yy) * s.w + xx];
                            let target = labels.data()[(b * l.h + yy * t + i) * l.w + xx * t + j];
                            total += (v - target) * (v - target);
                        }
                    }
                }
            }
        }
    }
    total / (outputs.len() * l.n) as f64
}

/// `cases` random evaluations against [`brute_force_loss`], plus a uniform
/// 0.5 error on a 2 x 2 image which must give exactly 1.
pub fn loss_oracle(cases: usize) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let phases = rng.random_range(1..4);
        let n = rng.random_range(1..3);
        let scales: Vec<usize> = match rng.random_range(0..3) {
            0 => vec![1],
            1 => vec![1, 2],
            _ => vec![1, 2, 4],
        };
        let full = Shape::new(n, 1, 8, 8);
        let labels = random_tensor::<f64>(&mut rng, full);
        let outputs = (0..phases)
            .map(|_| MultiScaleState::from_image(&random_tensor(&mut rng, full), &scales))
            .collect::<Result<Vec<_>>>()?;
        let got = multiscale_loss(&outputs, &labels, phases, &scales)?.item();
        let want = brute_force_loss(&outputs, &labels);
        worst = worst.max((got - want).abs() / want.abs().max(1.0));
    }
    let label = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
    let out = MultiScaleState::new(vec![1], vec![Tensor::full(Shape::new(1, 1, 2, 2), 0.5f32)])?;
    let hand = multiscale_loss(&[out], &label, 1, &[1])?.item();
    Ok((
        worst <= 1e-6 && hand == 1.0,
        format!("max gap to brute force {worst:.1e}, hand case {hand}"),
    ))
}

pub fn measurement_round_trip() -> Result<(bool, String)> {
    let op = SamplingOperator::for_ratio(0.1, 32, 3)?;
    let y = sample(&fixtures::scene(40, 2), &op)?;
    let mut buf = Vec::new();
    y.write_to(&mut buf)?;
    let back = Measurement::read_from(&buf[..])?;
    // values are stored at 32-bit precision
    let rounded: Vec<f64> = y.y.iter().map(|&v| v as f32 as f64).collect();
    let mut again = Vec::new();
    back.write_to(&mut again)?;
    let same = back.geometry == y.geometry && back.m == y.m && back.y == rounded && again == buf;
    let mut bad = buf.clone();
    bad[0] ^= 0xff;
    let rejects = Measurement::read_from(&bad[..]).is_err();
    Ok((same && rejects, format!("{} bytes, corrupt header rejected: {rejects}", buf.len())))
}

/// Save, load and re-evaluate; outputs must agree bit for bit.
pub fn checkpoint_round_trip() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let model = FhdunModel::<f32>::new(ModelConfig::tiny(0.25, 2), &mut rng)?;
    let y = sample(&fixtures::scene(48, 3), &model.sampling_operator()?)?;
    let before = model.reconstruct(&y, &ForwardOptions::default())?;
    let mut buf = Vec::new();
    Checkpoint::new(model).write_to(&mut buf)?;
    let loaded = Checkpoint::read_from(&buf[..])?.model;
    let after = loaded.reconstruct(&y, &ForwardOptions::default())?;
    let same = before
        .image
        .data()
        .iter()
        .zip(after.image.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    Ok((same, format!("{} bytes", buf.len())))
}

/// 8-bit PGM write and read of an exactly representable image.
pub fn image_round_trip() -> Result<(bool, String)> {
    let img = crate::Image::from_fn(8, 8, |x, y| ((x * 8 + y) * 3) as f64 / 255.0);
    let path = std::env::temp_dir().join(format!("fhdun-verify-{}.pgm", std::process::id()));
    img.save(&path)?;
    let back = crate::Image::load(&path);
    let _ = std::fs::remove_file(&path);
    let back = back?;
    let ok = back.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-12);
    Ok((ok, "8 x 8 PGM".into()))
}
