//! FHDUN: K unfolded FISTA phases over a multi-scale state.
//!
//! Each phase runs
//!
//! * MBAM: `U = X⁽ᵏ⁻¹⁾ + B (X⁽ᵏ⁻¹⁾ − X⁽ᵏ⁻²⁾)` with `B` generated from the two previous states,
//! * AGDM: `R = U − P S(Φ)ᵀ(Φ S⁻¹(U) − y)` with `P` generated from `U`,
//! * HPMM: `X⁽ᵏ⁾ = R + N(R)` with a hierarchical convolutional network `N`.
//!
//! `B` and `P` hold one scalar per branch and sample.

mod layers;
mod params;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::sampling::{measurements_for, BlockGeometry, Measurement, SamplingOperator};
use crate::scale_space::{scale_gradient, MultiScaleState, Observation};
use crate::tensor::{self, Real, Shape, Tensor};

use layers::{HpgNet, HpmNet};
pub use params::{Init, ParamSpec, ParamStore};
use params::Builder;

/// Largest `f32` below one; keeps `β < 1` after rounding.
pub const BETA_SCALE: f64 = 1.0 - 1.0 / (1u64 << 24) as f64;
/// Lower bound added to every step size.
pub const RHO_FLOOR: f64 = 1e-6;

/// Module variants for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    /// Momentum is a learned constant per phase and branch instead of generated.
    NoMbam,
    /// Step size is a learned constant per phase and branch instead of generated.
    NoAgdm,
    /// Only the full-resolution branch.
    SingleBranch,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "no-mbam" => Ok(Ablation::NoMbam),
            "no-agdm" => Ok(Ablation::NoAgdm),
            "single-branch" => Ok(Ablation::SingleBranch),
            other => Err(Error::invalid(format!(
                "unknown ablation '{other}' (expected none, no-mbam, no-agdm or single-branch)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of phases K.
    pub phases: usize,
    /// Scale factors T, increasing powers of two.
    pub scales: Vec<usize>,
    /// Feature width of each branch.
    pub widths: Vec<usize>,
    pub block: usize,
    pub ratio: f64,
    #[serde(default)]
    pub learned_phi: bool,
    /// Seed of the orthogonalized Gaussian Φ.
    #[serde(default)]
    pub phi_seed: u64,
    #[serde(default)]
    pub ablation: Ablation,
}

impl ModelConfig {
    /// Full-size configuration: K = 8, T = {1, 2, 4}, widths 16/32/64.
    pub fn standard(ratio: f64) -> Self {
        ModelConfig {
            phases: 8,
            scales: vec![1, 2, 4],
            widths: vec![16, 32, 64],
            block: 32,
            ratio,
            learned_phi: false,
            phi_seed: 0,
            ablation: Ablation::None,
        }
    }

    /// Widths 8/16/32 with `phases` phases.
    pub fn tiny(ratio: f64, phases: usize) -> Self {
        ModelConfig {
            phases,
            widths: vec![8, 16, 32],
            ..Self::standard(ratio)
        }
    }

    pub fn measurements(&self) -> Result<usize> {
        measurements_for(self.ratio, self.block * self.block)
    }

    /// Scales and widths after applying the ablation.
    pub fn branches(&self) -> (Vec<usize>, Vec<usize>) {
        match self.ablation {
            Ablation::SingleBranch => (vec![self.scales[0]], vec![self.widths[0]]),
            _ => (self.scales.clone(), self.widths.clone()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases == 0 {
            return Err(Error::invalid("model needs at least one phase"));
        }
        if self.scales.is_empty() || self.scales.len() != self.widths.len() {
            return Err(Error::invalid(format!(
                "{} scales for {} widths",
                self.scales.len(),
                self.widths.len()
            )));
        }
        if self.scales.iter().any(|&t| !t.is_power_of_two())
            || self.scales.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::invalid(format!(
                "scales must be increasing powers of two, got {:?}",
                self.scales
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::invalid("branch widths must be positive"));
        }
        let tmax = *self.scales.last().expect("non-empty");
        if self.block == 0 || self.block % tmax != 0 {
            return Err(Error::invalid(format!(
                "block size {} is not divisible by the largest scale {}",
                self.block, tmax
            )));
        }
        self.measurements()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Hyper {
    Generated(HpgNet),
    /// Index of one `(1, 1, 1, 1)` pre-activation per branch.
    Learned(Vec<usize>),
}

impl Hyper {
    fn raw<T: Real>(&self, p: &[Tensor<T>], inputs: &[Tensor<T>], n: usize) -> Result<Vec<Tensor<T>>> {
        match self {
            Hyper::Generated(net) => net.forward(p, inputs),
            Hyper::Learned(idx) => idx.iter().map(|&i| tensor::repeat_batch(&p[i], n)).collect(),
        }
    }
}

#[derive(Clone, Debug)]
struct Phase {
    momentum: Hyper,
    step: Hyper,
    prox: HpmNet,
}

#[derive(Debug)]
struct Architecture {
    phases: Vec<Phase>,
    phi: usize,
    specs: Arc<[ParamSpec]>,
}

impl Architecture {
    fn build(config: &ModelConfig, phi: &SamplingOperator) -> Self {
        let (scales, widths) = config.branches();
        let mut b = Builder::default();
        let phi_idx = b.push(
            "phi".into(),
            Shape::new(1, 1, phi.m(), phi.n()),
            Init::Given(phi.matrix().to_vec()),
            config.learned_phi,
        );
        let learned = |b: &mut Builder, name: &str| {
            Hyper::Learned(
                (0..scales.len())
                    .map(|i| b.push(format!("{name}.value.{i}"), Shape::scalar(), Init::Zeros, true))
                    .collect(),
            )
        };
        let phases = (0..config.phases)
            .map(|k| {
                let name = format!("phase{k}.momentum");
                let momentum = if config.ablation == Ablation::NoMbam {
                    learned(&mut b, &name)
                } else {
                    Hyper::Generated(HpgNet::build(&mut b, &name, &scales, &widths, 2))
                };
                let name = format!("phase{k}.step");
                let step = if config.ablation == Ablation::NoAgdm {
                    learned(&mut b, &name)
                } else {
                    Hyper::Generated(HpgNet::build(&mut b, &name, &scales, &widths, 1))
                };
                let prox = HpmNet::build(&mut b, &format!("phase{k}.prox"), &scales, &widths);
                Phase {
                    momentum,
                    step,
                    prox,
                }
            })
            .collect();
        Architecture {
            phases,
            phi: phi_idx,
            specs: b.finish().into(),
        }
    }
}

/// Inference-time overrides, used for phase sweeps and reduction checks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    /// Run only the first `phases` phases.
    pub phases: Option<usize>,
    /// Replace every generated momentum by this constant.
    pub beta: Option<f64>,
    /// Replace every generated step size by this constant.
    pub rho: Option<f64>,
    /// Skip the proximal network.
    pub identity_prox: bool,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T: Real = f32> {
    /// Branch average of the last state, `(n, 1, Hp, Wp)`.
    pub x_hat: Tensor<T>,
    /// `X⁽⁰⁾`.
    pub initial: MultiScaleState<T>,
    /// `X⁽¹⁾ … X⁽ᴷ⁾`.
    pub states: Vec<MultiScaleState<T>>,
    /// Per phase, per branch `(n, 1, 1, 1)` momentum values.
    pub betas: Vec<Vec<Tensor<T>>>,
    /// Per phase, per branch `(n, 1, 1, 1)` step sizes.
    pub rhos: Vec<Vec<Tensor<T>>>,
}

/// Single-image reconstruction with per-phase diagnostics.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub image: Image,
    /// Branch-averaged estimate after each phase, cropped.
    pub phase_images: Vec<Image>,
    /// `betas[k][t]`.
    pub betas: Vec<Vec<f64>>,
    /// `rhos[k][t]`.
    pub rhos: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct FhdunModel<T: Real = f32> {
    config: ModelConfig,
    arch: Arc<Architecture>,
    params: ParamStore<T>,
}

fn momentum_activation<T: Real>(z: &Tensor<T>) -> Tensor<T> {
    tensor::scale(&tensor::sigmoid(z), T::from_f64(BETA_SCALE))
}

fn step_activation<T: Real>(z: &Tensor<T>) -> Tensor<T> {
    // softplus(z + ln(e − 1)) equals one at z = 0
    let shift = (std::f64::consts::E - 1.0).ln();
    tensor::add_scalar(
        &tensor::softplus(&tensor::add_scalar(z, T::from_f64(shift))),
        T::from_f64(RHO_FLOOR),
    )
}

impl<T: Real> FhdunModel<T> {
    fn layout(config: &ModelConfig) -> Result<(Arc<Architecture>, SamplingOperator)> {
        config.validate()?;
        let op = SamplingOperator::for_ratio(config.ratio, config.block, config.phi_seed)?;
        Ok((Arc::new(Architecture::build(config, &op)), op))
    }

    /// Randomly initialized model with the seeded Gaussian Φ.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let (arch, _) = Self::layout(&config)?;
        let params = ParamStore::init(arch.specs.clone(), rng);
        Ok(FhdunModel {
            config,
            arch,
            params,
        })
    }

    /// Model whose every trainable weight is zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let (arch, _) = Self::layout(&config)?;
        let params = ParamStore::zeros(arch.specs.clone());
        Ok(FhdunModel {
            config,
            arch,
            params,
        })
    }

    /// Model with a caller-supplied sampling matrix of the configured size.
    pub fn with_sampling(mut self, op: &SamplingOperator) -> Result<Self> {
        let spec = &self.arch.specs[self.arch.phi];
        if Shape::new(1, 1, op.m(), op.n()) != spec.shape {
            return Err(Error::shape(
                "sampling matrix",
                format!("{}x{} for a model expecting {}", op.m(), op.n(), spec.shape),
            ));
        }
        let data = op.matrix().iter().map(|&v| T::from_f64(v)).collect();
        self.params.replace(self.arch.phi, data)?;
        Ok(self)
    }

    /// Model from stored parameter values, in [`Self::param_specs`] order.
    pub fn from_values(config: ModelConfig, values: Vec<Vec<T>>) -> Result<Self> {
        let (arch, _) = Self::layout(&config)?;
        let params = ParamStore::from_values(arch.specs.clone(), values)?;
        Ok(FhdunModel {
            config,
            arch,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.arch.specs
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn with_params(&self, params: ParamStore<T>) -> Result<Self> {
        if params.specs() != &self.arch.specs[..] {
            return Err(Error::invalid("parameter layout does not match the model"));
        }
        Ok(FhdunModel {
            config: self.config.clone(),
            arch: self.arch.clone(),
            params,
        })
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Copy whose trainable weights track gradients.
    pub fn tracked(&self) -> Self {
        FhdunModel {
            config: self.config.clone(),
            arch: self.arch.clone(),
            params: self.params.tracked(),
        }
    }

    pub fn cast<U: Real>(&self) -> FhdunModel<U> {
        FhdunModel {
            config: self.config.clone(),
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    pub fn scales(&self) -> Vec<usize> {
        self.config.branches().0
    }

    pub fn phi(&self) -> &Tensor<T> {
        &self.params.tensors()[self.arch.phi]
    }

    /// Sampling operator holding the model's (possibly learned) Φ.
    pub fn sampling_operator(&self) -> Result<SamplingOperator> {
        let s = self.phi().shape();
        SamplingOperator::from_matrix(s.h, self.config.block, self.phi().to_f64_vec())
            .map(|op| op.with_learned(self.config.learned_phi))
    }

    /// Block-samples a batch of images `(n, 1, H, W)` whose sides are multiples of the block size.
    pub fn observe(&self, images: &Tensor<T>) -> Result<Observation<T>> {
        let s = images.shape();
        let geometry = BlockGeometry::new(s.h, s.w, self.config.block)?;
        if geometry.padded_height != s.h || geometry.padded_width != s.w {
            return Err(Error::shape(
                "observe",
                format!("image {}x{} is not a multiple of block {}", s.h, s.w, self.config.block),
            ));
        }
        let y = tensor::block_sample(images, self.phi(), &geometry)?;
        Observation::new(y, self.phi().clone(), geometry)
    }

    pub fn observation(&self, y: &Measurement) -> Result<Observation<T>> {
        let ps = self.phi().shape();
        if y.m != ps.h || y.geometry.block != self.config.block {
            return Err(Error::shape(
                "measurement",
                format!(
                    "M = {}, block {} for a model with M = {}, block {}",
                    y.m, y.geometry.block, ps.h, self.config.block
                ),
            ));
        }
        Observation::new(y.to_tensor(), self.phi().clone(), y.geometry)
    }

    fn check_phase(&self, k: usize) -> Result<&Phase> {
        self.arch.phases.get(k).ok_or_else(|| {
            Error::invalid(format!("phase {k} out of range for {} phases", self.arch.phases.len()))
        })
    }

    /// MBAM of phase `k`: returns `U` and the per-branch momenta.
    pub fn mbam_forward(
        &self,
        k: usize,
        x_prev: &MultiScaleState<T>,
        x_prev2: &MultiScaleState<T>,
        beta: Option<f64>,
    ) -> Result<(MultiScaleState<T>, Vec<Tensor<T>>)> {
        let phase = self.check_phase(k)?;
        x_prev.check_same(x_prev2, "mbam")?;
        self.check_scales(x_prev, "mbam")?;
        let n = x_prev.full_shape().n;
        let p = self.params.tensors();
        let betas = match beta {
            Some(b) => vec![Tensor::full(Shape::new(n, 1, 1, 1), T::from_f64(b)); x_prev.len()],
            None => {
                let inputs = x_prev
                    .entries()
                    .iter()
                    .zip(x_prev2.entries())
                    .map(|(a, b)| tensor::concat_channels(&[a, b]))
                    .collect::<Result<Vec<_>>>()?;
                phase
                    .momentum
                    .raw(p, &inputs, n)?
                    .iter()
                    .map(momentum_activation)
                    .collect()
            }
        };
        let entries = x_prev
            .entries()
            .iter()
            .zip(x_prev2.entries())
            .zip(&betas)
            .map(|((a, b), beta)| {
                let diff = tensor::sub(a, b)?;
                tensor::add(a, &tensor::scale_per_sample(&diff, beta)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((MultiScaleState::new(x_prev.scales().to_vec(), entries)?, betas))
    }

    /// AGDM of phase `k`: returns `R` and the per-branch step sizes.
    pub fn agdm_forward(
        &self,
        k: usize,
        u: &MultiScaleState<T>,
        obs: &Observation<T>,
        rho: Option<f64>,
    ) -> Result<(MultiScaleState<T>, Vec<Tensor<T>>)> {
        let phase = self.check_phase(k)?;
        self.check_scales(u, "agdm")?;
        let n = u.full_shape().n;
        let rhos = match rho {
            Some(r) => vec![Tensor::full(Shape::new(n, 1, 1, 1), T::from_f64(r)); u.len()],
            None => phase
                .step
                .raw(self.params.tensors(), u.entries(), n)?
                .iter()
                .map(step_activation)
                .collect(),
        };
        let entries = u
            .entries()
            .iter()
            .zip(u.scales())
            .zip(&rhos)
            .map(|((x, &t), r)| scale_gradient(x, obs, r, t))
            .collect::<Result<Vec<_>>>()?;
        Ok((MultiScaleState::new(u.scales().to_vec(), entries)?, rhos))
    }

    /// HPMM of phase `k`.
    pub fn hpmm_forward(&self, k: usize, r: &MultiScaleState<T>) -> Result<MultiScaleState<T>> {
        let phase = self.check_phase(k)?;
        self.check_scales(r, "hpmm")?;
        let entries = phase.prox.forward(self.params.tensors(), r.entries())?;
        MultiScaleState::new(r.scales().to_vec(), entries)
    }

    fn check_scales(&self, s: &MultiScaleState<T>, op: &'static str) -> Result<()> {
        if s.scales() != self.scales().as_slice() {
            return Err(Error::shape(
                op,
                format!("state scales {:?}, model scales {:?}", s.scales(), self.scales()),
            ));
        }
        Ok(())
    }

    /// Runs the unfolded phases from `X⁽⁰⁾ = S_t(Φᵀy)`, with `X⁽⁻¹⁾ = X⁽⁰⁾`.
    pub fn forward(&self, obs: &Observation<T>, opts: &ForwardOptions) -> Result<ForwardOutput<T>> {
        if obs.phi.shape() != self.phi().shape() {
            return Err(Error::shape(
                "fhdun",
                format!("observation Φ {} vs model Φ {}", obs.phi.shape(), self.phi().shape()),
            ));
        }
        let k_run = match opts.phases {
            None => self.config.phases,
            Some(k) if (1..=self.config.phases).contains(&k) => k,
            Some(k) => {
                return Err(Error::invalid(format!(
                    "cannot run {k} phases of a {}-phase model",
                    self.config.phases
                )))
            }
        };
        let initial = MultiScaleState::from_image(&obs.back_projection()?, &self.scales())?;
        let mut prev2 = initial.clone();
        let mut prev = initial.clone();
        let mut states = Vec::with_capacity(k_run);
        let mut betas = Vec::with_capacity(k_run);
        let mut rhos = Vec::with_capacity(k_run);
        for k in 0..k_run {
            let (u, b) = self.mbam_forward(k, &prev, &prev2, opts.beta)?;
            let (r, p) = self.agdm_forward(k, &u, obs, opts.rho)?;
            let x = if opts.identity_prox { r } else { self.hpmm_forward(k, &r)? };
            betas.push(b);
            rhos.push(p);
            states.push(x.clone());
            prev2 = std::mem::replace(&mut prev, x);
        }
        Ok(ForwardOutput {
            x_hat: prev.mean_image()?,
            initial,
            states,
            betas,
            rhos,
        })
    }

    /// Reconstructs one measured image.
    pub fn reconstruct(&self, y: &Measurement, opts: &ForwardOptions) -> Result<Reconstruction> {
        let frozen = FhdunModel {
            config: self.config.clone(),
            arch: self.arch.clone(),
            params: self.params.frozen(),
        };
        let obs = frozen.observation(y)?;
        let out = frozen.forward(&obs, opts)?;
        let g = y.geometry;
        let to_image = |t: &Tensor<T>| -> Result<Image> {
            Image::new(g.padded_width, g.padded_height, t.to_f64_vec())?.crop(0, 0, g.width, g.height)
        };
        let phase_images = out
            .states
            .iter()
            .map(|s| to_image(&s.mean_image()?))
            .collect::<Result<Vec<_>>>()?;
        let scalars = |v: &Vec<Vec<Tensor<T>>>| -> Vec<Vec<f64>> {
            v.iter()
                .map(|per| per.iter().map(|t| t.item().as_f64()).collect())
                .collect()
        };
        Ok(Reconstruction {
            image: to_image(&out.x_hat)?,
            phase_images,
            betas: scalars(&out.betas),
            rhos: scalars(&out.rhos),
        })
    }
}
