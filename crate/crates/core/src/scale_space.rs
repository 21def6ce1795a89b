//! Multi-scale representations of an image and the per-scale gradient step.
//!
//! Scale `t` stores an `H x W` image as `t²` channels of size `H/t x W/t`
//! via the space-to-depth operator S_t ([`unshuffle`]). Every entry of a
//! [`MultiScaleState`] decodes through S_t⁻¹ to the same full-resolution
//! geometry.

use crate::error::{Error, Result};
use crate::sampling::BlockGeometry;
use crate::tensor::{self, Real, Shape, Tensor};

pub use crate::tensor::{unshuffle, unshuffle_inv};

/// Measurements and sampling matrix as tensors, shared by all branches.
#[derive(Clone, Debug)]
pub struct Observation<T: Real = f32> {
    /// `(n, 1, num_blocks, M)`.
    pub y: Tensor<T>,
    /// `(1, 1, M, N)`.
    pub phi: Tensor<T>,
    pub geometry: BlockGeometry,
}

impl<T: Real> Observation<T> {
    pub fn new(y: Tensor<T>, phi: Tensor<T>, geometry: BlockGeometry) -> Result<Self> {
        let (ys, ps) = (y.shape(), phi.shape());
        if ps.n != 1 || ps.c != 1 || ps.w != geometry.block_len() {
            return Err(Error::shape(
                "observation",
                format!("sampling matrix {} for block size {}", ps, geometry.block),
            ));
        }
        if ys.c != 1 || ys.h != geometry.num_blocks() || ys.w != ps.h {
            return Err(Error::shape(
                "observation",
                format!(
                    "measurements {} for {} blocks of {} values",
                    ys,
                    geometry.num_blocks(),
                    ps.h
                ),
            ));
        }
        Ok(Observation { y, phi, geometry })
    }

    pub fn batch(&self) -> usize {
        self.y.shape().n
    }

    /// Back-projection `Φᵀ y` on the padded canvas, `(n, 1, Hp, Wp)`.
    pub fn back_projection(&self) -> Result<Tensor<T>> {
        tensor::block_adjoint(&self.y, &self.phi, &self.geometry)
    }
}

/// The set `{x_t : t ∈ T}` of scale-space representations.
#[derive(Clone, Debug)]
pub struct MultiScaleState<T: Real = f32> {
    scales: Vec<usize>,
    entries: Vec<Tensor<T>>,
}

impl<T: Real> MultiScaleState<T> {
    /// Checks that every entry has `t²` channels and decodes to one common geometry.
    pub fn new(scales: Vec<usize>, entries: Vec<Tensor<T>>) -> Result<Self> {
        if scales.is_empty() || scales.len() != entries.len() {
            return Err(Error::shape(
                "multi-scale state",
                format!("{} scales for {} entries", scales.len(), entries.len()),
            ));
        }
        let mut full: Option<Shape> = None;
        for (&t, e) in scales.iter().zip(&entries) {
            let s = e.shape();
            if t == 0 || s.c != t * t {
                return Err(Error::shape(
                    "multi-scale state",
                    format!("scale {t} entry has shape {s}"),
                ));
            }
            let decoded = Shape::new(s.n, 1, s.h * t, s.w * t);
            match full {
                None => full = Some(decoded),
                Some(f) if f != decoded => {
                    return Err(Error::shape(
                        "multi-scale state",
                        format!("scale {t} decodes to {decoded}, expected {f}"),
                    ))
                }
                _ => {}
            }
        }
        Ok(MultiScaleState { scales, entries })
    }

    /// `{S_t(image)}` for a full-resolution `(n, 1, H, W)` image.
    pub fn from_image(image: &Tensor<T>, scales: &[usize]) -> Result<Self> {
        let entries = scales
            .iter()
            .map(|&t| unshuffle(image, t))
            .collect::<Result<Vec<_>>>()?;
        Self::new(scales.to_vec(), entries)
    }

    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    pub fn entries(&self) -> &[Tensor<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Full-resolution `(n, 1, H, W)` shape every entry decodes to.
    pub fn full_shape(&self) -> Shape {
        let s = self.entries[0].shape();
        let t = self.scales[0];
        Shape::new(s.n, 1, s.h * t, s.w * t)
    }

    pub fn same_geometry(&self, other: &Self) -> bool {
        self.scales == other.scales
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub(crate) fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if !self.same_geometry(other) {
            return Err(Error::shape(
                op,
                format!(
                    "states differ: scales {:?} vs {:?}",
                    self.scales, other.scales
                ),
            ));
        }
        Ok(())
    }

    /// `S_t⁻¹(x_t)` for the entry at `index`.
    pub fn decode(&self, index: usize) -> Result<Tensor<T>> {
        unshuffle_inv(&self.entries[index], self.scales[index])
    }

    /// Uniform average of all decoded branches.
    pub fn mean_image(&self) -> Result<Tensor<T>> {
        let mut acc = self.decode(0)?;
        for i in 1..self.len() {
            acc = tensor::add(&acc, &self.decode(i)?)?;
        }
        Ok(tensor::scale(&acc, T::from_f64(1.0 / self.len() as f64)))
    }

    pub fn detach(&self) -> Self {
        MultiScaleState {
            scales: self.scales.clone(),
            entries: self.entries.iter().map(|e| e.detach()).collect(),
        }
    }

    pub fn map(&self, f: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>) -> Result<Self> {
        let entries = self.entries.iter().map(f).collect::<Result<Vec<_>>>()?;
        Ok(MultiScaleState {
            scales: self.scales.clone(),
            entries,
        })
    }
}

/// `u_t − ρ_t · S_t(Φᵀ(Φ S_t⁻¹(u_t) − y))`.
///
/// `rho` holds one step size per batch entry, shape `(n, 1, 1, 1)`. The
/// gradient is taken in image space and re-encoded, so at `t = 1` this is
/// exactly the plain step `u − ρ Φᵀ(Φu − y)`.
pub fn scale_gradient<T: Real>(
    u: &Tensor<T>,
    obs: &Observation<T>,
    rho: &Tensor<T>,
    t: usize,
) -> Result<Tensor<T>> {
    let us = u.shape();
    let g = &obs.geometry;
    if us.c != t * t
        || us.h * t != g.padded_height
        || us.w * t != g.padded_width
        || us.n != obs.batch()
    {
        return Err(Error::shape(
            "scale_gradient",
            format!(
                "scale-{} input {} does not match {} measurements on {}x{}",
                t,
                us,
                obs.batch(),
                g.padded_height,
                g.padded_width
            ),
        ));
    }
    let image = unshuffle_inv(u, t)?;
    let residual = tensor::sub(&tensor::block_sample(&image, &obs.phi, g)?, &obs.y)?;
    let grad = unshuffle(&tensor::block_adjoint(&residual, &obs.phi, g)?, t)?;
    tensor::sub(u, &tensor::scale_per_sample(&grad, rho)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::SamplingOperator;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(shape, (0..shape.numel()).map(|_| rng.random::<f64>() - 0.5).collect())
            .unwrap()
    }

    #[test]
    fn scale_one_is_identity() {
        let x = random(Shape::new(2, 1, 4, 6), 1);
        assert_eq!(unshuffle(&x, 1).unwrap().data(), x.data());
        assert_eq!(unshuffle_inv(&x, 1).unwrap().data(), x.data());
    }

    #[test]
    fn two_by_two_layout() {
        let x = Tensor::<f64>::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let u = unshuffle(&x, 2).unwrap();
        assert_eq!(u.shape().dims(), [1, 4, 1, 1]);
        assert_eq!(u.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn channel_index_is_row_major_offset() {
        // value encodes (y, x); channel i*t+j at (Y, X) must hold pixel (Y*t+i, X*t+j)
        let t = 4;
        let x = Tensor::<f64>::new(
            [1, 1, 8, 8],
            (0..64).map(|k| k as f64).collect(),
        )
        .unwrap();
        let u = unshuffle(&x, t).unwrap();
        let s = u.shape();
        for i in 0..t {
            for j in 0..t {
                for yy in 0..2 {
                    for xx in 0..2 {
                        let v = u.data()[((i * t + j) * s.h + yy) * s.w + xx];
                        assert_eq!(v, ((yy * t + i) * 8 + xx * t + j) as f64);
                    }
                }
            }
        }
    }

    #[test]
    fn round_trips_and_errors() {
        let x = random(Shape::new(1, 1, 8, 8), 2);
        let back = unshuffle_inv(&unshuffle(&x, 4).unwrap(), 4).unwrap();
        assert_eq!(back.data(), x.data());
        let v = random(Shape::new(1, 4, 3, 3), 3);
        let again = unshuffle(&unshuffle_inv(&v, 2).unwrap(), 2).unwrap();
        assert_eq!(again.data(), v.data());
        assert!(unshuffle(&random(Shape::new(1, 1, 6, 6), 4), 4).is_err());
        assert!(unshuffle_inv(&random(Shape::new(1, 3, 2, 2), 5), 2).is_err());
        let c = Tensor::<f64>::full([1, 16, 2, 2], 0.7);
        assert!(unshuffle_inv(&c, 4).unwrap().data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn state_rejects_mismatched_geometry() {
        let a = Tensor::<f64>::zeros([1, 1, 8, 8]);
        let b = Tensor::<f64>::zeros([1, 4, 2, 2]);
        assert!(MultiScaleState::new(vec![1, 2], vec![a.clone(), b]).is_err());
        let c = Tensor::<f64>::zeros([1, 3, 4, 4]);
        assert!(MultiScaleState::new(vec![1, 2], vec![a, c]).is_err());
    }

    fn observation(seed: u64, x: &Tensor<f64>) -> (Observation<f64>, SamplingOperator) {
        let op = SamplingOperator::for_ratio(0.3, 8, seed).unwrap();
        let s = x.shape();
        let geom = op.geometry(s.h, s.w).unwrap();
        let phi = op.to_tensor::<f64>();
        let y = tensor::block_sample(x, &phi, &geom).unwrap();
        (Observation::new(y, phi, geom).unwrap(), op)
    }

    #[test]
    fn consistent_input_is_a_fixed_point() {
        let x = random(Shape::new(1, 1, 16, 16), 4);
        let (obs, _) = observation(5, &x);
        let rho = Tensor::full([1, 1, 1, 1], 0.8);
        for t in [1, 2, 4] {
            let u = unshuffle(&x, t).unwrap();
            let r = scale_gradient(&u, &obs, &rho, t).unwrap();
            for (a, b) in r.data().iter().zip(u.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_step_and_adjoint_reduction() {
        let x = random(Shape::new(1, 1, 16, 16), 6);
        let (obs, _) = observation(7, &x);
        let u = random(Shape::new(1, 4, 8, 8), 8);
        let r = scale_gradient(&u, &obs, &Tensor::zeros([1, 1, 1, 1]), 2).unwrap();
        assert_eq!(r.data(), u.data());

        let eye: Vec<f64> = (0..64)
            .flat_map(|i| (0..64).map(move |j| if i == j { 1.0 } else { 0.0 }))
            .collect();
        let op = SamplingOperator::from_matrix(64, 8, eye).unwrap();
        let geom = op.geometry(16, 16).unwrap();
        let phi = op.to_tensor::<f64>();
        let y = tensor::block_sample(&x, &phi, &geom).unwrap();
        let obs = Observation::new(y, phi, geom).unwrap();
        let r = scale_gradient(
            &Tensor::zeros([1, 1, 16, 16]),
            &obs,
            &Tensor::full([1, 1, 1, 1], 1.0),
            1,
        )
        .unwrap();
        assert_eq!(r.data(), x.data());
    }
}
