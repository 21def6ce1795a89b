//! Python bindings. Images cross the boundary as lists of rows with values in [0, 1].

use fhdun_core::checkpoint::Checkpoint;
use fhdun_core::model::{FhdunModel, ForwardOptions, ModelConfig};
use fhdun_core::sampling::{self, Measurement as CoreMeasurement, SamplingOperator as CoreOperator};
use fhdun_core::solvers::{self, SolverConfig, Transform};
use fhdun_core::tensor::{Shape, Tensor};
use fhdun_core::train::{TrainConfig, Trainer};
use fhdun_core::{fixtures, metrics, scale_space, verify as checks, Image};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Rows = Vec<Vec<f64>>;

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for fhdun_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(|e| match e {
            fhdun_core::Error::Io(io) => PyIOError::new_err(io.to_string()),
            other => PyValueError::new_err(other.to_string()),
        })
    }
}

fn to_image(rows: &Rows) -> PyResult<Image> {
    let height = rows.len();
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("image rows have different lengths"));
    }
    Image::new(width, height, rows.concat()).py()
}

fn to_rows(img: &Image) -> Rows {
    if img.width() == 0 {
        return Vec::new();
    }
    img.data().chunks(img.width()).map(<[f64]>::to_vec).collect()
}

fn parse_transform(name: &str) -> PyResult<Transform> {
    match name {
        "dct" => Ok(Transform::Dct),
        "identity" => Ok(Transform::Identity),
        other => Err(PyValueError::new_err(format!(
            "unknown transform '{other}' (expected 'dct' or 'identity')"
        ))),
    }
}

/// Block measurement matrix Φ with orthonormal rows.
#[pyclass(module = "fhdun")]
struct SamplingOperator {
    inner: CoreOperator,
}

#[pymethods]
impl SamplingOperator {
    #[new]
    #[pyo3(signature = (ratio, block = 32, seed = 0))]
    fn new(ratio: f64, block: usize, seed: u64) -> PyResult<Self> {
        Ok(SamplingOperator {
            inner: CoreOperator::for_ratio(ratio, block, seed).py()?,
        })
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn block(&self) -> usize {
        self.inner.block()
    }

    #[getter]
    fn ratio(&self) -> f64 {
        self.inner.ratio()
    }

    /// Row-major `m x n` entries.
    fn matrix(&self) -> Vec<f64> {
        self.inner.matrix().to_vec()
    }

    fn sample(&self, image: Rows) -> PyResult<Measurement> {
        Ok(Measurement {
            inner: sampling::sample(&to_image(&image)?, &self.inner).py()?,
        })
    }

    /// Back-projection Φᵀy, cropped to the original size.
    fn adjoint(&self, y: &Measurement) -> PyResult<Rows> {
        Ok(to_rows(&sampling::adjoint(&y.inner, &self.inner).py()?))
    }

    fn __repr__(&self) -> String {
        format!(
            "SamplingOperator(m={}, block={}, ratio={})",
            self.inner.m(),
            self.inner.block(),
            self.inner.ratio()
        )
    }
}

#[pyclass(module = "fhdun")]
struct Measurement {
    inner: CoreMeasurement,
}

#[pymethods]
impl Measurement {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Measurement {
            inner: CoreMeasurement::load(path).py()?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).py()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.geometry.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.geometry.width
    }

    #[getter]
    fn block(&self) -> usize {
        self.inner.geometry.block
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m
    }

    #[getter]
    fn num_blocks(&self) -> usize {
        self.inner.geometry.num_blocks()
    }

    /// Measurements block by block, row-major over blocks.
    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.y.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "Measurement({}x{}, {} blocks x {})",
            self.inner.geometry.width,
            self.inner.geometry.height,
            self.inner.geometry.num_blocks(),
            self.inner.m
        )
    }
}

#[pyclass(module = "fhdun", get_all)]
struct SolveResult {
    image: Rows,
    iterations: usize,
    converged: bool,
    /// Objective value at every iteration, starting from the initial guess.
    objective: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn solve(
    fista: bool,
    y: &Measurement,
    op: &SamplingOperator,
    lam: f64,
    rho: f64,
    max_iters: usize,
    tol: f64,
    transform: &str,
) -> PyResult<SolveResult> {
    let cfg = SolverConfig {
        lambda: lam,
        rho,
        max_iters,
        tol,
        transform: parse_transform(transform)?,
        ..Default::default()
    };
    let r = if fista {
        solvers::fista_solve(&y.inner, &op.inner, &cfg)
    } else {
        solvers::ista_solve(&y.inner, &op.inner, &cfg)
    }
    .py()?;
    Ok(SolveResult {
        image: to_rows(&r.image),
        iterations: r.iterations,
        converged: r.converged,
        objective: r.trace.iter().map(|t| t.objective).collect(),
    })
}

#[pyfunction]
#[pyo3(signature = (y, op, lam = 0.01, rho = 1.0, max_iters = 200, tol = 1e-6, transform = "dct"))]
fn ista(
    y: &Measurement,
    op: &SamplingOperator,
    lam: f64,
    rho: f64,
    max_iters: usize,
    tol: f64,
    transform: &str,
) -> PyResult<SolveResult> {
    solve(false, y, op, lam, rho, max_iters, tol, transform)
}

#[pyfunction]
#[pyo3(signature = (y, op, lam = 0.01, rho = 1.0, max_iters = 200, tol = 1e-6, transform = "dct"))]
fn fista(
    y: &Measurement,
    op: &SamplingOperator,
    lam: f64,
    rho: f64,
    max_iters: usize,
    tol: f64,
    transform: &str,
) -> PyResult<SolveResult> {
    solve(true, y, op, lam, rho, max_iters, tol, transform)
}

#[pyclass(module = "fhdun", get_all)]
struct Reconstruction {
    image: Rows,
    phase_images: Vec<Rows>,
    /// `betas[k][t]`: momentum of phase k, branch t.
    betas: Vec<Vec<f64>>,
    rhos: Vec<Vec<f64>>,
}

/// The unfolded reconstruction network.
#[pyclass(module = "fhdun")]
struct Model {
    inner: FhdunModel<f32>,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Model {
            inner: Checkpoint::load(path).py()?.model,
        })
    }

    /// Randomly initialized model from a JSON model config.
    #[staticmethod]
    #[pyo3(signature = (config, seed = 0))]
    fn from_config(config: &str, seed: u64) -> PyResult<Self> {
        let cfg: ModelConfig =
            serde_json::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Model {
            inner: FhdunModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).py()?,
        })
    }

    /// Widths 8/16/32 at scales 1/2/4.
    #[staticmethod]
    #[pyo3(signature = (ratio = 0.25, phases = 3, seed = 0))]
    fn tiny(ratio: f64, phases: usize, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig::tiny(ratio, phases);
        Ok(Model {
            inner: FhdunModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).py()?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        Checkpoint::new(self.inner.clone()).save(path).py()
    }

    #[getter]
    fn config(&self) -> String {
        serde_json::to_string(self.inner.config()).expect("config serializes")
    }

    #[getter]
    fn phases(&self) -> usize {
        self.inner.config().phases
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params().tensors().iter().map(|t| t.numel()).sum()
    }

    fn sampling_operator(&self) -> PyResult<SamplingOperator> {
        Ok(SamplingOperator {
            inner: self.inner.sampling_operator().py()?,
        })
    }

    #[pyo3(signature = (y, phases = None))]
    fn reconstruct(&self, y: &Measurement, phases: Option<usize>) -> PyResult<Reconstruction> {
        let opts = ForwardOptions {
            phases,
            ..Default::default()
        };
        let r = self.inner.reconstruct(&y.inner, &opts).py()?;
        Ok(Reconstruction {
            image: to_rows(&r.image),
            phase_images: r.phase_images.iter().map(to_rows).collect(),
            betas: r.betas,
            rhos: r.rhos,
        })
    }
}

/// Trains from a JSON training config; returns the model and per-step losses.
#[pyfunction]
fn train(config: &str) -> PyResult<(Model, Vec<f64>)> {
    let cfg = TrainConfig::from_json(config).py()?;
    let data = cfg.data.load().py()?;
    let mut trainer = Trainer::new(cfg, data).py()?;
    let log = trainer.run(|_| {}).py()?;
    Ok((
        Model {
            inner: trainer.model().clone(),
        },
        log.iter().map(|l| l.loss).collect(),
    ))
}

/// Procedural test scene of `size x size` pixels.
#[pyfunction]
#[pyo3(signature = (size, seed = 0))]
fn scene(size: usize, seed: u64) -> Rows {
    to_rows(&fixtures::scene(size, seed))
}

#[pyfunction]
#[pyo3(signature = (x, x_hat, peak = 1.0))]
fn psnr(x: Rows, x_hat: Rows, peak: f64) -> PyResult<f64> {
    metrics::psnr(&to_image(&x)?, &to_image(&x_hat)?, peak).py()
}

#[pyfunction]
#[pyo3(signature = (x, x_hat, peak = 1.0))]
fn ssim(x: Rows, x_hat: Rows, peak: f64) -> PyResult<f64> {
    metrics::ssim(&to_image(&x)?, &to_image(&x_hat)?, peak).py()
}

#[pyfunction]
fn soft_threshold(values: Vec<f64>, theta: f64) -> PyResult<Vec<f64>> {
    solvers::soft_threshold(&values, theta).py()
}

/// `(t_next, beta)` for the accelerated schedule.
#[pyfunction]
fn fista_momentum(t: f64) -> PyResult<(f64, f64)> {
    solvers::fista_momentum(t).py()
}

/// Space-to-depth: `t²` channels of `(H/t) x (W/t)` pixels.
#[pyfunction]
fn unshuffle(image: Rows, t: usize) -> PyResult<Vec<Rows>> {
    let img = to_image(&image)?;
    let x = Tensor::<f64>::from_f64(Shape::new(1, 1, img.height(), img.width()), img.data()).py()?;
    let s = scale_space::unshuffle(&x, t).py()?;
    let sh = s.shape();
    let plane = sh.h * sh.w;
    s.data()
        .chunks(plane)
        .map(|c| Ok(to_rows(&Image::new(sh.w, sh.h, c.to_vec()).py()?)))
        .collect()
}

/// Runs the built-in invariant checks: `(name, passed, detail)` per check.
#[pyfunction]
fn verify() -> Vec<(String, bool, String)> {
    checks::run_all()
        .into_iter()
        .map(|r| (r.name.to_string(), r.passed, r.detail))
        .collect()
}

#[pymodule]
fn fhdun(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<SamplingOperator>()?;
    m.add_class::<Measurement>()?;
    m.add_class::<SolveResult>()?;
    m.add_class::<Reconstruction>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(ista, m)?)?;
    m.add_function(wrap_pyfunction!(fista, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(scene, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(soft_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(fista_momentum, m)?)?;
    m.add_function(wrap_pyfunction!(unshuffle, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
