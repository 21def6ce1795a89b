//! Parameter initialization.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{ConvParams, Real, Shape, Tensor};

/// He (Kaiming) normal initialization for a ReLU network: `N(0, 2 / fan_in)`.
pub fn he_normal<T: Real, R: Rng + ?Sized>(shape: Shape, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..shape.numel())
        .map(|_| T::from_f64(normal.sample(rng)))
        .collect();
    Tensor::param(shape, data).expect("shape and data agree")
}

impl<T: Real> ConvParams<T> {
    /// He-initialized `k x k` convolution with zero bias and size-preserving padding.
    pub fn he<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let weight = he_normal(
            Shape::new(out_ch, in_ch, kernel, kernel),
            in_ch * kernel * kernel,
            rng,
        );
        let bias = Tensor::zeros(Shape::new(1, out_ch, 1, 1)).into_param();
        ConvParams::new(weight, bias, stride, kernel / 2).expect("valid kernel")
    }
}
