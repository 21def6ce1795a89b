use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use fhdun_core::checkpoint::Checkpoint;
use fhdun_core::metrics::MetricReport;
use fhdun_core::model::{FhdunModel, ForwardOptions};
use fhdun_core::sampling::{self, Measurement, SamplingOperator};
use fhdun_core::solvers::{fista_solve, ista_solve, SolveResult, SolverConfig};
use fhdun_core::train::{epoch_means, write_loss_csv, DataSource, TrainConfig, Trainer};
use fhdun_core::{fixtures, verify as checks, Image};
use serde::{Deserialize, Serialize};

use crate::manifest::{sidecar, Run};
use crate::{EvaluateArgs, ReconstructArgs, SampleArgs, Solver, TrainArgs};

/// Describes the Φ used for a measurement file.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhiMetadata {
    /// `orthogonalized-gaussian` (rebuilt from `seed`) or `checkpoint`.
    pub kind: String,
    pub seed: Option<u64>,
    pub ratio: f64,
    pub block: usize,
    pub m: usize,
    pub checkpoint: Option<PathBuf>,
}

fn load_model(path: &Path) -> Result<FhdunModel<f32>> {
    Ok(Checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?
        .model)
}

fn load_image(path: &Path) -> Result<Image> {
    Image::load(path).with_context(|| format!("reading image {}", path.display()))
}

fn load_solver_config(path: Option<&Path>) -> Result<SolverConfig> {
    let cfg = match path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)
            .with_context(|| format!("parsing solver config {}", p.display()))?,
        None => SolverConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

pub fn sample(a: &SampleArgs) -> Result<bool> {
    let mut run = Run::start("sample");
    let image = load_image(&a.input)?;
    run.input(&a.input);
    let (op, meta) = match &a.checkpoint {
        Some(path) => {
            run.input(path);
            let model = load_model(path)?;
            let cfg = model.config();
            if let Some(r) = a.ratio {
                ensure!(r == cfg.ratio, "--ratio {r} differs from the checkpoint's ratio {}", cfg.ratio);
            }
            let op = model.sampling_operator()?;
            let meta = PhiMetadata {
                kind: "checkpoint".into(),
                seed: (!cfg.learned_phi).then_some(cfg.phi_seed),
                ratio: cfg.ratio,
                block: cfg.block,
                m: op.m(),
                checkpoint: Some(path.clone()),
            };
            (op, meta)
        }
        None => {
            let ratio = a.ratio.unwrap_or(0.25);
            let op = SamplingOperator::for_ratio(ratio, a.block, a.seed)?;
            let meta = PhiMetadata {
                kind: "orthogonalized-gaussian".into(),
                seed: Some(a.seed),
                ratio,
                block: a.block,
                m: op.m(),
                checkpoint: None,
            };
            (op, meta)
        }
    };
    run.seed = meta.seed;
    let y = sampling::sample(&image, &op)?;
    y.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let back = Measurement::load(&a.out)?;
    ensure!(back.geometry == y.geometry && back.m == y.m, "measurement file did not read back");
    let meta_path = sidecar(&a.out, ".phi.json");
    write_json(&meta_path, &meta)?;
    run.output(&a.out);
    run.output(&meta_path);
    run.finish(&a.out)?;
    println!(
        "{}x{} image -> {} blocks x {} measurements ({})",
        y.geometry.width,
        y.geometry.height,
        y.geometry.num_blocks(),
        y.m,
        a.out.display()
    );
    Ok(true)
}

/// Φ for a classical solve: `--seed` first, then the measurement's metadata.
fn classical_operator(y: &Measurement, seed: Option<u64>, input: &Path) -> Result<SamplingOperator> {
    let n = y.geometry.block * y.geometry.block;
    if let Some(seed) = seed {
        return Ok(SamplingOperator::orthogonalized_gaussian(y.m, n, seed)?);
    }
    let meta_path = sidecar(input, ".phi.json");
    let text = std::fs::read_to_string(&meta_path).with_context(|| {
        format!("no --seed given and no metadata file {}", meta_path.display())
    })?;
    let meta: PhiMetadata = serde_json::from_str(&text)?;
    ensure!(
        meta.m == y.m && meta.block == y.geometry.block,
        "metadata {} does not match the measurement geometry",
        meta_path.display()
    );
    match (meta.seed, &meta.checkpoint) {
        (Some(seed), _) => Ok(SamplingOperator::orthogonalized_gaussian(y.m, n, seed)?),
        (None, Some(ckpt)) => Ok(load_model(ckpt)?.sampling_operator()?),
        (None, None) => bail!("metadata {} names no Φ", meta_path.display()),
    }
}

fn check_model_geometry(model: &FhdunModel<f32>, y: &Measurement, input: &Path) -> Result<()> {
    let cfg = model.config();
    let m = cfg.measurements()?;
    ensure!(
        cfg.block == y.geometry.block && m == y.m,
        "checkpoint expects block {} with {} measurements, file has block {} with {}",
        cfg.block,
        m,
        y.geometry.block,
        y.m
    );
    if let Ok(text) = std::fs::read_to_string(sidecar(input, ".phi.json")) {
        let meta: PhiMetadata = serde_json::from_str(&text)?;
        if !cfg.learned_phi {
            ensure!(
                meta.seed == Some(cfg.phi_seed),
                "measurement used Φ seed {:?}, checkpoint uses {}",
                meta.seed,
                cfg.phi_seed
            );
        } else {
            ensure!(meta.kind == "checkpoint", "checkpoint has a learned Φ; sample with --checkpoint");
        }
    }
    Ok(())
}

fn write_solver_trace(path: &Path, result: &SolveResult) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "iter,objective,residual,sparsity")?;
    for r in &result.trace {
        writeln!(w, "{},{:.9e},{:.9e},{:.6}", r.iter, r.objective, r.residual, r.sparsity)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ReconstructionReport {
    solver: String,
    #[serde(flatten)]
    metrics: MetricReport,
}

pub fn reconstruct(a: &ReconstructArgs) -> Result<bool> {
    let mut run = Run::start("reconstruct");
    let y = Measurement::load(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    run.input(&a.input);
    let truth = match &a.ground_truth {
        Some(p) => {
            let img = load_image(p)?;
            ensure!(
                (img.width(), img.height()) == (y.geometry.width, y.geometry.height),
                "ground truth is {}x{}, measurement is {}x{}",
                img.width(),
                img.height(),
                y.geometry.width,
                y.geometry.height
            );
            run.input(p);
            Some(img)
        }
        None => None,
    };
    if a.solver != Solver::Fhdun {
        ensure!(a.phases.is_none(), "--phases applies only to --solver fhdun");
    }
    let trace_path = sidecar(&a.out, ".trace.csv");
    let (image, phases) = match a.solver {
        Solver::Fhdun => {
            let path = a.checkpoint.as_ref().context("--solver fhdun needs --checkpoint")?;
            run.input(path);
            let model = load_model(path)?;
            check_model_geometry(&model, &y, &a.input)?;
            run.seed = Some(model.config().phi_seed);
            let opts = ForwardOptions {
                phases: a.phases,
                ..Default::default()
            };
            let rec = model.reconstruct(&y, &opts)?;
            let scales = model.scales();
            let mut w = BufWriter::new(File::create(&trace_path)?);
            writeln!(w, "phase,scale,beta,rho,psnr")?;
            for (k, (betas, rhos)) in rec.betas.iter().zip(&rec.rhos).enumerate() {
                let psnr = match &truth {
                    Some(x) => format!("{:.4}", fhdun_core::metrics::psnr(x, &rec.phase_images[k], 1.0)?),
                    None => String::new(),
                };
                for ((t, b), r) in scales.iter().zip(betas).zip(rhos) {
                    writeln!(w, "{},{t},{b:.9},{r:.9},{psnr}", k + 1)?;
                }
            }
            w.flush()?;
            run.output(&trace_path);
            (rec.image, rec.phase_images)
        }
        Solver::Adjoint => {
            let op = classical_operator(&y, a.seed, &a.input)?;
            run.seed = op.seed();
            (sampling::adjoint(&y, &op)?, Vec::new())
        }
        Solver::Ista | Solver::Fista => {
            let op = classical_operator(&y, a.seed, &a.input)?;
            run.seed = op.seed();
            let cfg = load_solver_config(a.config.as_deref())?;
            if let Some(p) = &a.config {
                run.config = Some(p.clone());
            }
            let result = if a.solver == Solver::Ista {
                ista_solve(&y, &op, &cfg)?
            } else {
                fista_solve(&y, &op, &cfg)?
            };
            write_solver_trace(&trace_path, &result)?;
            run.output(&trace_path);
            eprintln!(
                "{} iterations, converged: {}, objective {:.6e}",
                result.iterations,
                result.converged,
                result.final_objective()
            );
            (result.image, Vec::new())
        }
    };
    image.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    run.output(&a.out);
    if let Some(x) = &truth {
        let report = ReconstructionReport {
            solver: format!("{:?}", a.solver).to_lowercase(),
            metrics: MetricReport::compute(x, &image, &phases)?,
        };
        let path = sidecar(&a.out, ".metrics.json");
        write_json(&path, &report)?;
        run.output(&path);
        println!("PSNR {:.2} dB, SSIM {:.4}", report.metrics.psnr, report.metrics.ssim);
    }
    run.finish(&a.out)?;
    Ok(true)
}

pub fn train(a: &TrainArgs) -> Result<bool> {
    let mut run = Run::start("train");
    let mut cfg = match &a.config {
        Some(p) => {
            run.config = Some(p.clone());
            run.input(p);
            TrainConfig::load(p).with_context(|| format!("loading config {}", p.display()))?
        }
        None => TrainConfig::desk(a.ratio.unwrap_or(0.25)),
    };
    if let (Some(r), Some(_)) = (a.ratio, &a.config) {
        cfg.model.ratio = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(ab) = a.ablate {
        cfg.model.ablation = ab;
    }
    if let Some(c) = &a.checkpoint {
        cfg.resume = Some(c.clone());
    }
    cfg.validate()?;
    run.seed = Some(cfg.seed);
    if let DataSource::Directory { path } = &cfg.data {
        run.input(path);
    }
    let data = cfg.data.load()?;
    let mut trainer = match &cfg.resume {
        Some(path) => {
            run.input(path);
            let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            let optimizer = ck.optimizer.context("checkpoint has no optimizer state to resume from")?;
            let step = ck.training.context("checkpoint has no training progress")?.step;
            Trainer::resume(cfg.clone(), data, ck.model, optimizer, step)?
        }
        None => Trainer::new(cfg.clone(), data)?,
    };
    let total = cfg.total_steps();
    let started = Instant::now();
    let log = trainer.run(|l| {
        if l.step % 100 == 0 || l.step + 1 == total {
            eprintln!(
                "step {}/{} epoch {} loss {:.4} lr {:.2e} ({:.0}s)",
                l.step + 1,
                total,
                l.epoch,
                l.loss,
                l.lr,
                started.elapsed().as_secs_f64()
            );
        }
    })?;
    for (e, mean) in epoch_means(&log) {
        println!("epoch {e} mean loss {mean:.6}");
    }
    let ck = Checkpoint {
        model: trainer.model().clone(),
        optimizer: Some(trainer.optimizer().clone()),
        training: Some(trainer.progress()),
    };
    ck.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    Checkpoint::load(&a.out).context("checkpoint did not read back")?;
    run.output(&a.out);
    let loss_path = sidecar(&a.out, ".loss.csv");
    write_loss_csv(BufWriter::new(File::create(&loss_path)?), &log)?;
    run.output(&loss_path);
    run.finish(&a.out)?;
    Ok(true)
}

#[derive(Serialize)]
struct ImageMetrics {
    index: usize,
    #[serde(flatten)]
    metrics: MetricReport,
}

#[derive(Serialize)]
struct EvaluationReport {
    solver: String,
    ratio: f64,
    images: Vec<ImageMetrics>,
    mean_psnr: f64,
    mean_ssim: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    mean_phase_psnr: Vec<f64>,
    seconds_per_image: f64,
}

pub fn evaluate(a: &EvaluateArgs) -> Result<bool> {
    let mut run = Run::start("evaluate");
    let images = match &a.data {
        Some(dir) => {
            run.input(dir);
            DataSource::Directory { path: dir.clone() }.load()?
        }
        None => fixtures::corpus(a.count, a.size, a.fixture_seed),
    };
    ensure!(!images.is_empty(), "no images to evaluate");
    // with a checkpoint every solver sees the network's Φ
    let model = match &a.checkpoint {
        Some(p) => {
            run.input(p);
            Some(load_model(p)?)
        }
        None if a.solver == Solver::Fhdun => bail!("--solver fhdun needs --checkpoint"),
        None => None,
    };
    let (op, ratio) = match &model {
        Some(m) => (m.sampling_operator()?, m.config().ratio),
        None => (SamplingOperator::for_ratio(a.ratio, a.block, a.seed)?, a.ratio),
    };
    run.seed = op.seed();
    let solver_cfg = load_solver_config(a.config.as_deref())?;
    let opts = ForwardOptions {
        phases: a.phases,
        ..Default::default()
    };
    let mut rows = Vec::new();
    let mut elapsed = 0.0;
    for (index, x) in images.iter().enumerate() {
        let y = sampling::sample(x, &op)?;
        let started = Instant::now();
        let (x_hat, phases) = match (a.solver, &model) {
            (Solver::Fhdun, Some(m)) => {
                let rec = m.reconstruct(&y, &opts)?;
                (rec.image, rec.phase_images)
            }
            (Solver::Adjoint, _) => (sampling::adjoint(&y, &op)?, Vec::new()),
            (Solver::Ista, _) => (ista_solve(&y, &op, &solver_cfg)?.image, Vec::new()),
            _ => (fista_solve(&y, &op, &solver_cfg)?.image, Vec::new()),
        };
        elapsed += started.elapsed().as_secs_f64();
        rows.push(ImageMetrics {
            index,
            metrics: MetricReport::compute(x, &x_hat, &phases)?,
        });
    }
    let n = rows.len() as f64;
    let phase_count = rows[0].metrics.phase_psnr.len();
    let report = EvaluationReport {
        solver: format!("{:?}", a.solver).to_lowercase(),
        ratio,
        mean_psnr: rows.iter().map(|r| r.metrics.psnr).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.metrics.ssim).sum::<f64>() / n,
        mean_phase_psnr: (0..phase_count)
            .map(|k| rows.iter().map(|r| r.metrics.phase_psnr[k]).sum::<f64>() / n)
            .collect(),
        seconds_per_image: elapsed / n,
        images: rows,
    };
    write_json(&a.out, &report)?;
    run.output(&a.out);
    run.finish(&a.out)?;
    println!(
        "{}: mean PSNR {:.2} dB, mean SSIM {:.4} over {} images",
        report.solver, report.mean_psnr, report.mean_ssim, n
    );
    if !report.mean_phase_psnr.is_empty() {
        let trend: Vec<String> = report.mean_phase_psnr.iter().map(|p| format!("{p:.2}")).collect();
        println!("per-phase PSNR: {}", trend.join(" "));
    }
    Ok(true)
}

pub fn verify() -> Result<bool> {
    let results = checks::run_all();
    let mut ok = true;
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        ok &= r.passed;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {} failed", results.len(), failed);
    Ok(ok)
}
