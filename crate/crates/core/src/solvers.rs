//! Proximal-gradient solvers for
//! `min_x ½‖Φx − y‖² + λ‖Ψx‖₁`
//! with Ψ either the identity or the orthonormal block DCT.
//!
//! Both solvers work on the zero-padded canvas and crop at the end.

use serde::{Deserialize, Serialize};

use crate::dct::BlockDct;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::sampling::{adjoint_padded, dot, BlockGeometry, Measurement, SamplingOperator};
use crate::tensor::{gather_blocks, scatter_blocks};

/// Sparsifying transform Ψ.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transform {
    Identity,
    #[default]
    Dct,
}

/// Starting point x⁰.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialGuess {
    #[default]
    Zeros,
    /// `Φᵀy`.
    BackProjection,
}

/// Unset JSON keys take the defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub lambda: f64,
    pub rho: f64,
    pub max_iters: usize,
    /// Stop once `‖xᵏ − xᵏ⁻¹‖ / max(‖xᵏ⁻¹‖, 1e-12)` drops below this; 0 disables.
    pub tol: f64,
    pub transform: Transform,
    pub init: InitialGuess,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            lambda: 0.01,
            rho: 1.0,
            max_iters: 200,
            tol: 1e-6,
            transform: Transform::Dct,
            init: InitialGuess::Zeros,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(Error::invalid(format!("rho must be > 0, got {}", self.rho)));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::invalid(format!("tol must be >= 0, got {}", self.tol)));
        }
        Ok(())
    }
}

/// One row of a solver trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    /// `½‖Φx − y‖² + λ‖Ψx‖₁`.
    pub objective: f64,
    /// `‖Φx − y‖₂`.
    pub residual: f64,
    /// Fraction of transform coefficients that are exactly zero.
    pub sparsity: f64,
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    /// Final estimate cropped to the original size.
    pub image: Image,
    /// Row 0 is the starting point, row k the k-th iterate.
    pub trace: Vec<TraceRow>,
    pub iterations: usize,
    pub converged: bool,
}

impl SolveResult {
    pub fn final_objective(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |r| r.objective)
    }

    /// First iteration whose objective is within `gap` of `target`.
    pub fn iterations_to_reach(&self, target: f64, gap: f64) -> Option<usize> {
        self.trace
            .iter()
            .find(|r| r.objective - target <= gap)
            .map(|r| r.iter)
    }
}

/// `sign(v)·max(|v| − θ, 0)`, the proximal map of `θ|·|`.
pub fn soft_threshold_scalar(v: f64, theta: f64) -> f64 {
    if v > theta {
        v - theta
    } else if v < -theta {
        v + theta
    } else {
        0.0
    }
}

/// Elementwise soft thresholding; `theta` must be non-negative.
pub fn soft_threshold(v: &[f64], theta: f64) -> Result<Vec<f64>> {
    if !(theta >= 0.0) {
        return Err(Error::invalid(format!("threshold must be >= 0, got {theta}")));
    }
    Ok(v.iter().map(|&x| soft_threshold_scalar(x, theta)).collect())
}

/// One step of the FISTA schedule: `t_next = (1 + √(1 + 4 t_prev²)) / 2` and
/// the extrapolation weight `beta = (t_prev − 1) / t_next`.
pub fn fista_momentum(t_prev: f64) -> Result<(f64, f64)> {
    if !(t_prev >= 1.0) {
        return Err(Error::invalid(format!("t must be >= 1, got {t_prev}")));
    }
    let t_next = (1.0 + (1.0 + 4.0 * t_prev * t_prev).sqrt()) / 2.0;
    Ok((t_next, (t_prev - 1.0) / t_next))
}

/// FISTA bookkeeping: the scalar `t` and the previous two iterates.
#[derive(Clone, Debug)]
pub struct MomentumState {
    pub t_prev: f64,
    pub x_prev: Vec<f64>,
    pub x_prev2: Vec<f64>,
}

impl MomentumState {
    pub fn new(x0: Vec<f64>) -> Self {
        MomentumState {
            t_prev: 1.0,
            x_prev2: x0.clone(),
            x_prev: x0,
        }
    }

    /// Advances `t` and returns `u = x_prev + beta (x_prev − x_prev2)`.
    pub fn extrapolate(&mut self) -> Vec<f64> {
        let (t_next, beta) = fista_momentum(self.t_prev).expect("t stays >= 1");
        self.t_prev = t_next;
        self.x_prev
            .iter()
            .zip(&self.x_prev2)
            .map(|(&a, &b)| a + beta * (a - b))
            .collect()
    }

    pub fn push(&mut self, x: Vec<f64>) {
        self.x_prev2 = std::mem::replace(&mut self.x_prev, x);
    }
}

/// The least-squares-plus-ℓ₁ problem on the padded canvas.
struct Problem<'a> {
    op: &'a SamplingOperator,
    y: &'a Measurement,
    geom: BlockGeometry,
    dct: Option<BlockDct>,
    lambda: f64,
}

impl<'a> Problem<'a> {
    fn new(y: &'a Measurement, op: &'a SamplingOperator, cfg: &SolverConfig) -> Result<Self> {
        if y.m != op.m() || y.geometry.block != op.block() {
            return Err(Error::shape(
                "solver",
                format!(
                    "measurement M = {}, B = {} vs operator M = {}, B = {}",
                    y.m,
                    y.geometry.block,
                    op.m(),
                    op.block()
                ),
            ));
        }
        Ok(Problem {
            op,
            y,
            geom: y.geometry,
            dct: (cfg.transform == Transform::Dct).then(|| BlockDct::new(op.block())),
            lambda: cfg.lambda,
        })
    }

    fn canvas_len(&self) -> usize {
        self.geom.padded_height * self.geom.padded_width
    }

    fn blocks(&self, x: &[f64]) -> Vec<f64> {
        let mut b = vec![0.0; self.geom.num_blocks() * self.geom.block_len()];
        gather_blocks(x, &self.geom, &mut b);
        b
    }

    fn canvas(&self, blocks: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.canvas_len()];
        scatter_blocks(blocks, &self.geom, &mut x);
        x
    }

    /// `Φx − y`, block by block.
    fn residual(&self, x: &[f64]) -> Vec<f64> {
        let mut r = self.op.apply_blocks(&self.blocks(x));
        r.iter_mut().zip(&self.y.y).for_each(|(a, b)| *a -= b);
        r
    }

    /// `v − ρ Φᵀ(Φv − y)`.
    fn gradient_step(&self, v: &[f64], rho: f64) -> Vec<f64> {
        let grad = self.canvas(&self.op.apply_t_blocks(&self.residual(v)));
        v.iter().zip(&grad).map(|(a, g)| a - rho * g).collect()
    }

    fn coefficients(&self, x: &[f64]) -> Vec<f64> {
        match &self.dct {
            Some(d) => d.forward_stack(&self.blocks(x)),
            None => x.to_vec(),
        }
    }

    /// `Ψᵀ soft(Ψv, θ)`.
    fn prox(&self, v: &[f64], theta: f64) -> Vec<f64> {
        match &self.dct {
            Some(d) => {
                let c = d.forward_stack(&self.blocks(v));
                let s: Vec<f64> = c.iter().map(|&x| soft_threshold_scalar(x, theta)).collect();
                self.canvas(&d.inverse_stack(&s))
            }
            None => v.iter().map(|&x| soft_threshold_scalar(x, theta)).collect(),
        }
    }

    fn trace_row(&self, iter: usize, x: &[f64]) -> TraceRow {
        let r = self.residual(x);
        let c = self.coefficients(x);
        let l1: f64 = c.iter().map(|v| v.abs()).sum();
        let zeros = c.iter().filter(|&&v| v == 0.0).count();
        let rr = dot(&r, &r);
        TraceRow {
            iter,
            objective: 0.5 * rr + self.lambda * l1,
            residual: rr.sqrt(),
            sparsity: zeros as f64 / c.len() as f64,
        }
    }

    fn initial(&self, init: InitialGuess) -> Result<Vec<f64>> {
        Ok(match init {
            InitialGuess::Zeros => vec![0.0; self.canvas_len()],
            InitialGuess::BackProjection => adjoint_padded(self.y, self.op)?.into_data(),
        })
    }

    fn finish(&self, x: Vec<f64>) -> Result<Image> {
        Image::new(self.geom.padded_width, self.geom.padded_height, x)?.crop(
            0,
            0,
            self.geom.width,
            self.geom.height,
        )
    }
}

fn relative_change(x: &[f64], prev: &[f64]) -> f64 {
    let diff: f64 = x.iter().zip(prev).map(|(a, b)| (a - b) * (a - b)).sum();
    diff.sqrt() / dot(prev, prev).sqrt().max(1e-12)
}

/// ISTA: `xᵏ = prox_{ρλ}(xᵏ⁻¹ − ρΦᵀ(Φxᵏ⁻¹ − y))`.
pub fn ista_solve(y: &Measurement, op: &SamplingOperator, cfg: &SolverConfig) -> Result<SolveResult> {
    cfg.validate()?;
    let p = Problem::new(y, op, cfg)?;
    let mut x = p.initial(cfg.init)?;
    let mut trace = vec![p.trace_row(0, &x)];
    let mut converged = false;
    let mut iterations = 0;
    for k in 1..=cfg.max_iters {
        let next = p.prox(&p.gradient_step(&x, cfg.rho), cfg.rho * cfg.lambda);
        let change = relative_change(&next, &x);
        x = next;
        trace.push(p.trace_row(k, &x));
        iterations = k;
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(SolveResult {
        image: p.finish(x)?,
        trace,
        iterations,
        converged,
    })
}

/// FISTA: the proximal step is taken at the extrapolated point
/// `uᵏ = xᵏ⁻¹ + ((tᵏ⁻¹ − 1)/tᵏ)(xᵏ⁻¹ − xᵏ⁻²)` with `t⁰ = 1`, `x⁻¹ = x⁰`.
pub fn fista_solve(y: &Measurement, op: &SamplingOperator, cfg: &SolverConfig) -> Result<SolveResult> {
    cfg.validate()?;
    let p = Problem::new(y, op, cfg)?;
    let x0 = p.initial(cfg.init)?;
    let mut trace = vec![p.trace_row(0, &x0)];
    let mut state = MomentumState::new(x0);
    let mut converged = false;
    let mut iterations = 0;
    for k in 1..=cfg.max_iters {
        let u = state.extrapolate();
        let next = p.prox(&p.gradient_step(&u, cfg.rho), cfg.rho * cfg.lambda);
        let change = relative_change(&next, &state.x_prev);
        trace.push(p.trace_row(k, &next));
        state.push(next);
        iterations = k;
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(SolveResult {
        image: p.finish(state.x_prev)?,
        trace,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::sample;

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(soft_threshold(&[1.5, -1.5, 0.3], 1.0).unwrap(), vec![0.5, -0.5, 0.0]);
        assert_eq!(soft_threshold(&[0.3], 0.5).unwrap(), vec![0.0]);
        let v = [0.1, -2.0, 3.5];
        assert_eq!(soft_threshold(&v, 0.0).unwrap(), v.to_vec());
        assert!(soft_threshold(&v, -0.1).is_err());
    }

    #[test]
    fn momentum_examples() {
        let (t1, b1) = fista_momentum(1.0).unwrap();
        assert!((t1 - (1.0 + 5f64.sqrt()) / 2.0).abs() < 1e-15);
        assert_eq!(b1, 0.0);
        let (t2, b2) = fista_momentum(1.61803).unwrap();
        assert!((t2 - 2.19353).abs() < 1e-5);
        assert!((b2 - 0.28175).abs() < 1e-5);
        assert!(fista_momentum(0.5).is_err());
    }

    fn identity_op(block: usize) -> SamplingOperator {
        let n = block * block;
        let eye = (0..n)
            .flat_map(|i| (0..n).map(move |j| if i == j { 1.0 } else { 0.0 }))
            .collect();
        SamplingOperator::from_matrix(n, block, eye).unwrap()
    }

    #[test]
    fn identity_problem_is_solved_in_one_step() {
        let op = identity_op(4);
        let x = Image::from_fn(4, 4, |i, j| (i as f64 - j as f64) * 0.3);
        let y = sample(&x, &op).unwrap();
        let cfg = SolverConfig {
            lambda: 0.2,
            rho: 1.0,
            max_iters: 5,
            tol: 0.0,
            transform: Transform::Identity,
            init: InitialGuess::Zeros,
        };
        let r = ista_solve(&y, &op, &cfg).unwrap();
        let expected = soft_threshold(x.data(), 0.2).unwrap();
        assert_eq!(r.image.data(), expected.as_slice());
        let f1 = r.trace[1].objective;
        assert!(r.trace[1..].iter().all(|row| (row.objective - f1).abs() < 1e-15));

        let f = fista_solve(&y, &op, &cfg).unwrap();
        assert_eq!(f.image.data(), expected.as_slice());
    }

    #[test]
    fn first_fista_step_matches_ista() {
        let op = SamplingOperator::for_ratio(0.4, 8, 3).unwrap();
        let x = Image::from_fn(16, 8, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0);
        let y = sample(&x, &op).unwrap();
        let cfg = SolverConfig {
            max_iters: 1,
            tol: 0.0,
            ..Default::default()
        };
        let a = ista_solve(&y, &op, &cfg).unwrap();
        let b = fista_solve(&y, &op, &cfg).unwrap();
        assert_eq!(a.image, b.image);
    }

    #[test]
    fn unconstrained_solution_is_back_projection() {
        let op = SamplingOperator::for_ratio(0.25, 8, 4).unwrap();
        let x = Image::from_fn(8, 8, |i, j| ((i + 2 * j) % 5) as f64 / 5.0);
        let y = sample(&x, &op).unwrap();
        let cfg = SolverConfig {
            lambda: 0.0,
            rho: 1.0,
            max_iters: 5,
            tol: 0.0,
            transform: Transform::Identity,
            init: InitialGuess::Zeros,
        };
        let r = ista_solve(&y, &op, &cfg).unwrap();
        assert!(r.trace.last().unwrap().residual < 1e-6);
        let bp = crate::sampling::adjoint(&y, &op).unwrap();
        for (a, b) in r.image.data().iter().zip(bp.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_invalid_config() {
        let op = identity_op(2);
        let y = sample(&Image::zeros(2, 2), &op).unwrap();
        let bad = SolverConfig {
            rho: 0.0,
            ..Default::default()
        };
        assert!(ista_solve(&y, &op, &bad).is_err());
        let bad = SolverConfig {
            lambda: -1.0,
            ..Default::default()
        };
        assert!(fista_solve(&y, &op, &bad).is_err());
    }
}
