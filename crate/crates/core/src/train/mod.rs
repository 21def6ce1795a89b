//! Training: the multi-scale loss, data augmentation and the optimizer loop.

mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixtures;
use crate::image::Image;
use crate::model::{FhdunModel, ForwardOptions, ModelConfig};
use crate::scale_space::{unshuffle, MultiScaleState};
use crate::tensor::{self, Real, Shape, Tensor};

pub use optim::{AdamConfig, AdamW};

/// Flushes subnormal floats to zero until dropped, then restores the old
/// mode. Gradients reaching the hyperparameter generators are often
/// subnormal, and x86 handles those in microcode, a quarter of the step time.
struct FlushSubnormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

impl FlushSubnormals {
    #[cfg(target_arch = "x86_64")]
    fn new() -> Self {
        // flush-to-zero and denormals-are-zero
        const FTZ_DAZ: u32 = 0x8040;
        let mut saved = 0u32;
        // SAFETY: stmxcsr/ldmxcsr only read and write the SSE control word
        // through a valid 4-byte location.
        unsafe {
            std::arch::asm!("stmxcsr [{}]", in(reg) &mut saved, options(nostack));
            let on = saved | FTZ_DAZ;
            std::arch::asm!("ldmxcsr [{}]", in(reg) &on, options(nostack, readonly));
        }
        FlushSubnormals { saved }
    }

    #[cfg(not(target_arch = "x86_64"))]
    fn new() -> Self {
        FlushSubnormals {}
    }
}

impl Drop for FlushSubnormals {
    fn drop(&mut self) {
        // SAFETY: restores the control word saved in `new`.
        #[cfg(target_arch = "x86_64")]
        unsafe {
            std::arch::asm!("ldmxcsr [{}]", in(reg) &self.saved, options(nostack, readonly));
        }
    }
}

/// `(1 / (K · N_a)) Σ_i Σ_k Σ_t ‖(x_i)ₜᵏ − S_t(x_i)‖²_F` over the phase
/// outputs of a batch of `N_a` labels `(N_a, 1, H, W)`.
pub fn multiscale_loss<T: Real>(
    outputs: &[MultiScaleState<T>],
    labels: &Tensor<T>,
    phases: usize,
    scales: &[usize],
) -> Result<Tensor<T>> {
    if outputs.len() != phases || phases == 0 {
        return Err(Error::shape(
            "multiscale_loss",
            format!("{} phase outputs for K = {}", outputs.len(), phases),
        ));
    }
    let targets = scales
        .iter()
        .map(|&t| unshuffle(labels, t))
        .collect::<Result<Vec<_>>>()?;
    let mut total: Option<Tensor<T>> = None;
    for (k, state) in outputs.iter().enumerate() {
        if state.scales() != scales {
            return Err(Error::shape(
                "multiscale_loss",
                format!("phase {k} has scales {:?}, expected {:?}", state.scales(), scales),
            ));
        }
        for (x, target) in state.entries().iter().zip(&targets) {
            let term = tensor::sum_squares(&tensor::sub(x, target)?);
            total = Some(match total {
                None => term,
                Some(acc) => tensor::add(&acc, &term)?,
            });
        }
    }
    let n_a = labels.shape().n;
    let total = total.expect("at least one term");
    Ok(tensor::scale(&total, T::from_f64(1.0 / (phases * n_a) as f64)))
}

/// Rotates a square image by `quarter_turns · 90°` counter-clockwise.
pub fn rotate90(image: &Image, quarter_turns: usize) -> Result<Image> {
    let (w, h) = (image.width(), image.height());
    let q = quarter_turns % 4;
    if q % 2 == 1 && w != h {
        return Err(Error::invalid(format!("cannot rotate a {w}x{h} image by 90 degrees")));
    }
    Ok(match q {
        0 => image.clone(),
        1 => Image::from_fn(w, h, |x, y| image.get(w - 1 - y, x)),
        2 => Image::from_fn(w, h, |x, y| image.get(w - 1 - x, h - 1 - y)),
        _ => Image::from_fn(w, h, |x, y| image.get(y, h - 1 - x)),
    })
}

pub fn flip_horizontal(image: &Image) -> Image {
    let w = image.width();
    Image::from_fn(w, image.height(), |x, y| image.get(w - 1 - x, y))
}

/// Uniformly random rotation by a multiple of 90°, then a horizontal flip
/// with probability one half.
pub fn augment<R: Rng + ?Sized>(image: &Image, rng: &mut R) -> Result<Image> {
    let turns = rng.random_range(0..4);
    let rotated = rotate90(image, turns)?;
    Ok(if rng.random_bool(0.5) { flip_horizontal(&rotated) } else { rotated })
}

/// Where training images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// Synthetic scenes from [`fixtures::corpus`].
    Fixtures { count: usize, size: usize, seed: u64 },
    /// Every PGM/PNG file in a directory.
    Directory { path: PathBuf },
}

impl DataSource {
    pub fn load(&self) -> Result<Vec<Image>> {
        let images = match self {
            DataSource::Fixtures { count, size, seed } => fixtures::corpus(*count, *size, *seed),
            DataSource::Directory { path } => {
                let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| {
                        matches!(
                            p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                            Some(ref e) if e == "pgm" || e == "png"
                        )
                    })
                    .collect();
                files.sort();
                files.iter().map(Image::load).collect::<Result<Vec<_>>>()?
            }
        };
        if images.is_empty() {
            return Err(Error::invalid("training data set is empty"));
        }
        Ok(images)
    }
}

fn default_decay_epochs() -> usize {
    30
}

fn default_decay_factor() -> f64 {
    0.5
}

fn default_augment() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub learning_rate: f64,
    /// The learning rate is multiplied by `lr_decay_factor` every `lr_decay_epochs` epochs.
    #[serde(default = "default_decay_epochs")]
    pub lr_decay_epochs: usize,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Random rotations and flips of each patch.
    #[serde(default = "default_augment")]
    pub augment: bool,
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataSource,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
}

impl TrainConfig {
    /// Full-length schedule: 200 epochs of 1000 iterations on 96x96 patches.
    pub fn standard(ratio: f64, data: DataSource) -> Self {
        TrainConfig {
            epochs: 200,
            iters_per_epoch: 1000,
            batch_size: 16,
            patch_size: 96,
            learning_rate: 1e-4,
            lr_decay_epochs: 30,
            lr_decay_factor: 0.5,
            adam: AdamConfig::default(),
            augment: true,
            seed: 0,
            model: ModelConfig::standard(ratio),
            data,
            resume: None,
        }
    }

    /// 5000 single-image steps on 64x64 fixtures, about 20 minutes on one
    /// CPU core. Patches span several blocks so the network sees block seams.
    pub fn desk(ratio: f64) -> Self {
        TrainConfig {
            epochs: 5,
            iters_per_epoch: 1000,
            batch_size: 1,
            patch_size: 64,
            learning_rate: 2e-3,
            lr_decay_epochs: 2,
            lr_decay_factor: 0.5,
            adam: AdamConfig::default(),
            augment: true,
            seed: 0,
            model: ModelConfig::tiny(ratio, 3),
            data: DataSource::Fixtures {
                count: 32,
                size: 64,
                seed: 1,
            },
            resume: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.iters_per_epoch) as u64
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let tmax = *self.model.scales.last().expect("validated");
        if self.patch_size == 0
            || self.patch_size % self.model.block != 0
            || self.patch_size % tmax != 0
        {
            return Err(Error::invalid(format!(
                "patch size {} must be a positive multiple of block {} and scale {}",
                self.patch_size, self.model.block, tmax
            )));
        }
        if self.batch_size == 0 || self.iters_per_epoch == 0 {
            return Err(Error::invalid("batch_size and iters_per_epoch must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !(self.lr_decay_factor > 0.0) || self.lr_decay_epochs == 0 {
            return Err(Error::invalid("invalid learning-rate schedule"));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay_factor.powi((epoch / self.lr_decay_epochs) as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Writes a loss curve as CSV with columns `epoch,step,loss,lr`.
pub fn write_loss_csv(mut w: impl Write, log: &[StepLog]) -> Result<()> {
    writeln!(w, "epoch,step,loss,lr")?;
    for r in log {
        writeln!(w, "{},{},{:.9e},{:.6e}", r.epoch, r.step, r.loss, r.lr)?;
    }
    Ok(())
}

/// Random `size x size` crop.
fn random_crop<R: Rng + ?Sized>(image: &Image, size: usize, rng: &mut R) -> Result<Image> {
    if image.width() < size || image.height() < size {
        return Err(Error::invalid(format!(
            "image {}x{} is smaller than the {size}x{size} patch",
            image.width(),
            image.height()
        )));
    }
    let x0 = rng.random_range(0..=image.width() - size);
    let y0 = rng.random_range(0..=image.height() - size);
    image.crop(x0, y0, size, size)
}

/// Stacks equally sized images into an `(n, 1, H, W)` tensor.
pub fn batch_tensor<T: Real>(images: &[Image]) -> Result<Tensor<T>> {
    let (w, h) = (images[0].width(), images[0].height());
    let mut data = Vec::with_capacity(images.len() * w * h);
    for im in images {
        if im.width() != w || im.height() != h {
            return Err(Error::shape("batch", "images differ in size"));
        }
        data.extend(im.data().iter().map(|&v| T::from_f64(v)));
    }
    Tensor::new(Shape::new(images.len(), 1, h, w), data)
}

/// Progress saved with a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub step: u64,
    pub config: TrainConfig,
}

pub struct Trainer {
    config: TrainConfig,
    model: FhdunModel<f32>,
    optimizer: AdamW,
    step: u64,
    data: Vec<Image>,
}

impl Trainer {
    /// Fresh model initialized from the configured seed.
    pub fn new(config: TrainConfig, data: Vec<Image>) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::invalid("training data set is empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = FhdunModel::new(config.model.clone(), &mut rng)?;
        let optimizer = AdamW::new(config.adam, model.params());
        Ok(Trainer {
            config,
            model,
            optimizer,
            step: 0,
            data,
        })
    }

    /// Continues from a saved model, optimizer state and step count.
    pub fn resume(
        config: TrainConfig,
        data: Vec<Image>,
        model: FhdunModel<f32>,
        optimizer: AdamW,
        step: u64,
    ) -> Result<Self> {
        config.validate()?;
        if model.config() != &config.model {
            return Err(Error::invalid("checkpoint model differs from the configured model"));
        }
        if optimizer.m.len() != model.params().len() {
            return Err(Error::invalid("optimizer state does not match the model"));
        }
        Ok(Trainer {
            config,
            model,
            optimizer,
            step,
            data,
        })
    }

    pub fn model(&self) -> &FhdunModel<f32> {
        &self.model
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optimizer
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn progress(&self) -> TrainProgress {
        TrainProgress {
            step: self.step,
            config: self.config.clone(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps()
    }

    /// Batch for step `step`; depends only on the seed and the step index.
    pub fn batch(&self, step: u64) -> Result<Vec<Image>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step + 1);
        (0..self.config.batch_size)
            .map(|_| {
                let src = &self.data[rng.random_range(0..self.data.len())];
                let patch = random_crop(src, self.config.patch_size, &mut rng)?;
                if self.config.augment {
                    augment(&patch, &mut rng)
                } else {
                    Ok(patch)
                }
            })
            .collect()
    }

    /// Loss of the current weights on `images`.
    pub fn loss_on(&self, images: &[Image]) -> Result<f64> {
        let labels = batch_tensor::<f32>(images)?;
        let obs = self.model.observe(&labels)?;
        let out = self.model.forward(&obs, &ForwardOptions::default())?;
        let loss = multiscale_loss(&out.states, &labels, self.config.model.phases, &self.model.scales())?;
        Ok(loss.item() as f64)
    }

    /// One optimizer step; returns the loss before the update.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let _ftz = FlushSubnormals::new();
        let epoch = (self.step / self.config.iters_per_epoch as u64) as usize;
        let lr = self.config.lr_at(epoch);
        let images = self.batch(self.step)?;
        let labels = batch_tensor::<f32>(&images)?;
        let tracked = self.model.tracked();
        let obs = tracked.observe(&labels)?;
        let out = tracked.forward(&obs, &ForwardOptions::default())?;
        let loss = multiscale_loss(&out.states, &labels, self.config.model.phases, &tracked.scales())?;
        let value = loss.item() as f64;
        if !value.is_finite() {
            return Err(Error::Diverged {
                step: self.step as usize,
                loss: value,
            });
        }
        loss.backward()?;
        let grads: Vec<Option<Vec<f32>>> = tracked.params().tensors().iter().map(|t| t.grad()).collect();
        if let Some(i) = grads
            .iter()
            .position(|g| g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
        {
            let name = &tracked.param_specs()[i].name;
            return Err(Error::invalid(format!(
                "non-finite gradient for {name} at step {}",
                self.step
            )));
        }
        self.optimizer.step(self.model.params_mut(), &grads, lr)?;
        let log = StepLog {
            epoch,
            step: self.step,
            loss: value,
            lr,
        };
        self.step += 1;
        Ok(log)
    }

    /// Trains until the configured number of steps, calling `on_step` after each.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let mut log = Vec::new();
        while !self.is_done() {
            let entry = self.train_step()?;
            on_step(&entry);
            log.push(entry);
        }
        Ok(log)
    }
}

/// Mean loss per epoch from a step log.
pub fn epoch_means(log: &[StepLog]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in log {
        match out.last_mut() {
            Some((e, s, n)) if *e == r.epoch => {
                *s += r.loss;
                *n += 1;
            }
            _ => out.push((r.epoch, r.loss, 1)),
        }
    }
    out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig::desk(0.25);
        cfg.model = ModelConfig {
            phases: 1,
            scales: vec![1, 2],
            widths: vec![2, 2],
            block: 8,
            ratio: 0.5,
            learned_phi: false,
            phi_seed: 0,
            ablation: Default::default(),
        };
        cfg.patch_size = 8;
        cfg.batch_size = 2;
        cfg.epochs = 1;
        cfg.iters_per_epoch = 3;
        cfg
    }

    #[test]
    fn loss_hand_case() {
        let label = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        let out = MultiScaleState::new(vec![1], vec![Tensor::full(Shape::new(1, 1, 2, 2), 0.5)]).unwrap();
        let l = multiscale_loss(&[out.clone()], &label, 1, &[1]).unwrap();
        assert_eq!(l.item(), 1.0);
        assert!(multiscale_loss(&[out.clone()], &label, 2, &[1]).is_err());
        assert!(multiscale_loss(&[out], &label, 1, &[1, 2]).is_err());
    }

    #[test]
    fn rotations_and_flips() {
        let a = Image::from_fn(5, 5, |x, y| (x * 5 + y) as f64);
        assert_eq!(rotate90(&rotate90(&a, 2).unwrap(), 2).unwrap(), a);
        assert_eq!(rotate90(&rotate90(&a, 1).unwrap(), 3).unwrap(), a);
        assert_eq!(flip_horizontal(&flip_horizontal(&a)), a);
        let r = rotate90(&a, 1).unwrap();
        assert_eq!(r.get(0, 0), a.get(4, 0));
        let wide = Image::zeros(4, 2);
        assert!(rotate90(&wide, 1).is_err());
        assert!(rotate90(&wide, 2).is_ok());
    }

    #[test]
    fn lr_schedule_halves() {
        let cfg = TrainConfig::standard(0.1, DataSource::Fixtures { count: 1, size: 96, seed: 0 });
        assert_eq!(cfg.lr_at(0), 1e-4);
        assert_eq!(cfg.lr_at(29), 1e-4);
        assert_eq!(cfg.lr_at(30), 5e-5);
        assert_eq!(cfg.lr_at(65), 2.5e-5);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let mut v = serde_json::to_value(tiny_config()).unwrap();
        assert!(TrainConfig::from_json(&v.to_string()).is_ok());
        v["learning_rat"] = serde_json::json!(0.1);
        let err = TrainConfig::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("learning_rat"), "{err}");
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let mut cfg = tiny_config();
        cfg.learning_rate = 0.0;
        let data = fixtures::corpus(2, 16, 0);
        let mut t = Trainer::new(cfg, data).unwrap();
        let before = t.model().params().clone();
        t.run(|_| {}).unwrap();
        for (a, b) in before.tensors().iter().zip(t.model().params().tensors()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn fixed_seed_reproduces_losses() {
        let data = fixtures::corpus(2, 16, 0);
        let a = Trainer::new(tiny_config(), data.clone()).unwrap().run(|_| {}).unwrap();
        let b = Trainer::new(tiny_config(), data).unwrap().run(|_| {}).unwrap();
        assert_eq!(a, b);
        assert_eq!(epoch_means(&a).len(), 1);
    }

    #[test]
    fn loss_csv_header() {
        let mut buf = Vec::new();
        let log = [StepLog {
            epoch: 0,
            step: 0,
            loss: 1.5,
            lr: 1e-3,
        }];
        write_loss_csv(&mut buf, &log).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,step,loss,lr\n0,0,"));
    }
}
