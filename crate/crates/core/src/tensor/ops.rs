use super::conv::{self, ConvGeom};
use super::{Op, Real, Shape, Tensor};
use crate::error::{Error, Result};
use crate::sampling::BlockGeometry;

/// Weights of one convolution layer.
///
/// `weight` is `(out_ch, in_ch, k, k)` with `k` in {1, 3}; `bias` is
/// `(1, out_ch, 1, 1)`.
#[derive(Clone, Debug)]
pub struct ConvParams<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        let ws = weight.shape();
        if ws.h != ws.w || !(ws.h == 1 || ws.h == 3) {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be 1x1 or 3x3, got {}x{}", ws.h, ws.w),
            ));
        }
        if bias.shape() != Shape::new(1, ws.n, 1, 1) {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {} does not match {} output channels", bias.shape(), ws.n),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        Ok(ConvParams {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn map<T: Real>(a: &Tensor<T>, f: impl Fn(T) -> T) -> Vec<T> {
    a.data().iter().map(|&x| f(x)).collect()
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    Ok(Tensor::from_op(
        a.shape(),
        zip_map(a, b, |x, y| x + y),
        Op::Add(a.clone(), b.clone()),
    ))
}

pub fn sub<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("sub", a, b)?;
    Ok(Tensor::from_op(
        a.shape(),
        zip_map(a, b, |x, y| x - y),
        Op::Sub(a.clone(), b.clone()),
    ))
}

/// Elementwise product.
pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    Ok(Tensor::from_op(
        a.shape(),
        zip_map(a, b, |x, y| x * y),
        Op::Mul(a.clone(), b.clone()),
    ))
}

/// Multiplication by a constant.
pub fn scale<T: Real>(a: &Tensor<T>, c: T) -> Tensor<T> {
    Tensor::from_op(a.shape(), map(a, |x| x * c), Op::Scale(a.clone(), c))
}

/// Addition of a constant.
pub fn add_scalar<T: Real>(a: &Tensor<T>, c: T) -> Tensor<T> {
    Tensor::from_op(a.shape(), map(a, |x| x + c), Op::AddScalar(a.clone()))
}

/// `max(0, x)`; the derivative at 0 is taken as 0.
pub fn relu<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    Tensor::from_op(
        a.shape(),
        map(a, |x| if x > T::zero() { x } else { T::zero() }),
        Op::Relu(a.clone()),
    )
}

pub(crate) fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    Tensor::from_op(a.shape(), map(a, sigmoid_scalar), Op::Sigmoid(a.clone()))
}

/// `ln(1 + e^x)`, evaluated without overflow.
pub fn softplus<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let f = |x: T| {
        if x > T::zero() {
            x + (-x).exp().ln_1p()
        } else {
            x.exp().ln_1p()
        }
    };
    Tensor::from_op(a.shape(), map(a, f), Op::Softplus(a.clone()))
}

/// Sum of all elements as a 1x1x1x1 tensor.
pub fn sum<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let s: f64 = a.data().iter().map(|v| v.as_f64()).sum();
    Tensor::from_op(Shape::scalar(), vec![T::from_f64(s)], Op::Sum(a.clone()))
}

/// Sum of squared elements, i.e. the squared Frobenius norm.
pub fn sum_squares<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let s: f64 = a
        .data()
        .iter()
        .map(|v| {
            let v = v.as_f64();
            v * v
        })
        .sum();
    Tensor::from_op(
        Shape::scalar(),
        vec![T::from_f64(s)],
        Op::SumSquares(a.clone()),
    )
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?
        .shape();
    let mut channels = 0;
    for p in parts {
        let s = p.shape();
        if s.n != first.n || s.h != first.h || s.w != first.w {
            return Err(Error::shape(
                "concat_channels",
                format!("{} vs {}", s, first),
            ));
        }
        channels += s.c;
    }
    let out_shape = Shape::new(first.n, channels, first.h, first.w);
    let mut data = Vec::with_capacity(out_shape.numel());
    for b in 0..first.n {
        for p in parts {
            let len = p.shape().sample_len();
            data.extend_from_slice(&p.data()[b * len..(b + 1) * len]);
        }
    }
    Ok(Tensor::from_op(
        out_shape,
        data,
        Op::Concat(parts.iter().map(|&p| p.clone()).collect()),
    ))
}

/// Spatial mean per channel, giving `(n, c, 1, 1)`.
pub fn global_avg_pool<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let s = a.shape();
    let plane = s.plane();
    let data = a
        .data()
        .chunks(plane)
        .map(|ch| T::from_f64(ch.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64))
        .collect();
    Tensor::from_op(
        Shape::new(s.n, s.c, 1, 1),
        data,
        Op::GlobalAvgPool(a.clone()),
    )
}

/// Nearest-neighbour upsampling by 2 in both spatial dimensions.
pub fn nearest_upsample2<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let s = a.shape();
    let out = Shape::new(s.n, s.c, 2 * s.h, 2 * s.w);
    let mut data = Vec::with_capacity(out.numel());
    for plane in a.data().chunks(s.plane()) {
        for y in 0..out.h {
            let row = &plane[(y / 2) * s.w..(y / 2 + 1) * s.w];
            for x in 0..out.w {
                data.push(row[x / 2]);
            }
        }
    }
    Tensor::from_op(out, data, Op::Nearest2x(a.clone()))
}

/// Cross-correlation with zero padding.
pub fn conv2d<T: Real>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    let is = input.shape();
    let ws = params.weight.shape();
    if is.c != ws.c {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input {} has {} channels, weight {} expects {}",
                is, is.c, ws, ws.c
            ),
        ));
    }
    let g = ConvGeom::new(is, ws, params.stride, params.padding).ok_or_else(|| {
        Error::shape(
            "conv2d",
            format!(
                "input {} too small for {}x{} kernel with padding {}",
                is, ws.h, ws.w, params.padding
            ),
        )
    })?;
    let data = conv::forward(
        &g,
        is.n,
        input.data(),
        params.weight.data(),
        params.bias.data(),
    );
    Ok(Tensor::from_op(
        Shape::new(is.n, g.cout, g.hout, g.wout),
        data,
        Op::Conv2d {
            input: input.clone(),
            weight: params.weight.clone(),
            bias: params.bias.clone(),
            stride: params.stride,
            padding: params.padding,
        },
    ))
}

/// Halves the spatial size with a stride-2 3x3 convolution.
pub fn downsample2<T: Real>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::shape(
            "downsample2",
            format!("spatial dims of {} must be even", s),
        ));
    }
    if params.stride != 2 || params.kernel() != 3 || params.padding != 1 {
        return Err(Error::invalid(
            "downsample2 needs a 3x3 convolution with stride 2 and padding 1",
        ));
    }
    conv2d(input, params)
}

/// Doubles the spatial size: nearest-neighbour x2, then a 3x3 convolution.
pub fn upsample2<T: Real>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    if params.stride != 1 || params.kernel() != 3 || params.padding != 1 {
        return Err(Error::invalid(
            "upsample2 needs a 3x3 convolution with stride 1 and padding 1",
        ));
    }
    conv2d(&nearest_upsample2(input), params)
}

/// Space-to-depth by factor `t`: each `t x t` block of a channel becomes
/// `t²` channels, ordered row-major by the offset inside the block.
pub fn unshuffle<T: Real>(a: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    let s = a.shape();
    if t == 0 || s.h % t != 0 || s.w % t != 0 {
        return Err(Error::shape(
            "unshuffle",
            format!("spatial dims of {} not divisible by scale {}", s, t),
        ));
    }
    let out = Shape::new(s.n, s.c * t * t, s.h / t, s.w / t);
    let data = permute_unshuffle(a.data(), s, t, false);
    Ok(Tensor::from_op(out, data, Op::Unshuffle(a.clone(), t)))
}

/// Inverse of [`unshuffle`]; input channels must be a multiple of `t²`.
pub fn unshuffle_inv<T: Real>(a: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    let s = a.shape();
    if t == 0 || s.c % (t * t) != 0 {
        return Err(Error::shape(
            "unshuffle_inv",
            format!("{} channels is not a multiple of {}²", s.c, t),
        ));
    }
    let full = Shape::new(s.n, s.c / (t * t), s.h * t, s.w * t);
    let data = permute_unshuffle(a.data(), full, t, true);
    Ok(Tensor::from_op(full, data, Op::UnshuffleInv(a.clone(), t)))
}

/// Moves data between full-resolution layout `full` and its unshuffled layout.
/// `inverse == false` reads full layout and writes unshuffled layout.
pub(crate) fn permute_unshuffle<T: Real>(src: &[T], full: Shape, t: usize, inverse: bool) -> Vec<T> {
    let (hs, ws) = (full.h / t, full.w / t);
    let mut dst = vec![T::zero(); src.len()];
    for b in 0..full.n {
        for c in 0..full.c {
            for i in 0..t {
                for j in 0..t {
                    let oc = c * t * t + i * t + j;
                    for y in 0..hs {
                        for x in 0..ws {
                            let full_idx =
                                ((b * full.c + c) * full.h + y * t + i) * full.w + x * t + j;
                            let small_idx = ((b * full.c * t * t + oc) * hs + y) * ws + x;
                            if inverse {
                                dst[full_idx] = src[small_idx];
                            } else {
                                dst[small_idx] = src[full_idx];
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

/// Multiplies every element of batch entry `b` by `scales[b]`;
/// `scales` has shape `(n, 1, 1, 1)`.
pub fn scale_per_sample<T: Real>(x: &Tensor<T>, scales: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if scales.shape() != Shape::new(s.n, 1, 1, 1) {
        return Err(Error::shape(
            "scale_per_sample",
            format!("scales {} for input {}", scales.shape(), s),
        ));
    }
    let len = s.sample_len();
    let data = x
        .data()
        .chunks(len)
        .zip(scales.data())
        .flat_map(|(chunk, &k)| chunk.iter().map(move |&v| v * k))
        .collect();
    Ok(Tensor::from_op(
        s,
        data,
        Op::ScalePerSample(x.clone(), scales.clone()),
    ))
}

/// Tiles a single-sample tensor `(1, c, h, w)` into `(n, c, h, w)`.
pub fn repeat_batch<T: Real>(a: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    let s = a.shape();
    if s.n != 1 || n == 0 {
        return Err(Error::shape(
            "repeat_batch",
            format!("cannot tile {} into {} samples", s, n),
        ));
    }
    let data = a.data().repeat(n);
    Ok(Tensor::from_op(
        Shape::new(n, s.c, s.h, s.w),
        data,
        Op::RepeatBatch(a.clone()),
    ))
}

fn check_phi<T: Real>(op: &'static str, phi: &Tensor<T>, geom: &BlockGeometry) -> Result<usize> {
    let ps = phi.shape();
    if ps.n != 1 || ps.c != 1 || ps.w != geom.block_len() || ps.h == 0 {
        return Err(Error::shape(
            op,
            format!(
                "sampling matrix {} does not match block size {} (N = {})",
                ps,
                geom.block,
                geom.block_len()
            ),
        ));
    }
    Ok(ps.h)
}

/// Gathers the blocks of one padded image into a `(num_blocks, N)` row-major matrix.
pub(crate) fn gather_blocks<T: Real>(img: &[T], geom: &BlockGeometry, out: &mut [T]) {
    let b = geom.block;
    let pw = geom.padded_width;
    for by in 0..geom.blocks_down() {
        for bx in 0..geom.blocks_across() {
            let row = &mut out[(by * geom.blocks_across() + bx) * b * b..][..b * b];
            for i in 0..b {
                let src = &img[(by * b + i) * pw + bx * b..][..b];
                row[i * b..(i + 1) * b].copy_from_slice(src);
            }
        }
    }
}

/// Inverse of [`gather_blocks`], adding into `img`.
pub(crate) fn scatter_blocks<T: Real>(blocks: &[T], geom: &BlockGeometry, img: &mut [T]) {
    let b = geom.block;
    let pw = geom.padded_width;
    for by in 0..geom.blocks_down() {
        for bx in 0..geom.blocks_across() {
            let row = &blocks[(by * geom.blocks_across() + bx) * b * b..][..b * b];
            for i in 0..b {
                let dst = &mut img[(by * b + i) * pw + bx * b..][..b];
                for (d, &s) in dst.iter_mut().zip(&row[i * b..(i + 1) * b]) {
                    *d += s;
                }
            }
        }
    }
}

/// Block measurement `y_b = Φ vec(b)` of a padded image batch `(n, 1, Hp, Wp)`.
/// `phi` is `(1, 1, M, N)`; the result is `(n, 1, num_blocks, M)`.
pub fn block_sample<T: Real>(
    image: &Tensor<T>,
    phi: &Tensor<T>,
    geom: &BlockGeometry,
) -> Result<Tensor<T>> {
    let m = check_phi("block_sample", phi, geom)?;
    let s = image.shape();
    if s.c != 1 || s.h != geom.padded_height || s.w != geom.padded_width {
        return Err(Error::shape(
            "block_sample",
            format!(
                "image {} does not match padded geometry {}x{}",
                s, geom.padded_height, geom.padded_width
            ),
        ));
    }
    let nb = geom.num_blocks();
    let n = geom.block_len();
    let mut blocks = vec![T::zero(); nb * n];
    let mut out = vec![T::zero(); s.n * nb * m];
    for b in 0..s.n {
        gather_blocks(&image.data()[b * s.plane()..(b + 1) * s.plane()], geom, &mut blocks);
        // Y (nb x M) = V (nb x N) * Φᵀ
        T::gemm(
            nb,
            n,
            m,
            T::one(),
            &blocks,
            n as isize,
            1,
            phi.data(),
            1,
            n as isize,
            T::zero(),
            &mut out[b * nb * m..(b + 1) * nb * m],
            m as isize,
            1,
        );
    }
    Ok(Tensor::from_op(
        Shape::new(s.n, 1, nb, m),
        out,
        Op::BlockSample {
            image: image.clone(),
            phi: phi.clone(),
            geom: *geom,
        },
    ))
}

/// Block adjoint `Φᵀ y_b` folded back to a padded image batch `(n, 1, Hp, Wp)`.
pub fn block_adjoint<T: Real>(
    meas: &Tensor<T>,
    phi: &Tensor<T>,
    geom: &BlockGeometry,
) -> Result<Tensor<T>> {
    let m = check_phi("block_adjoint", phi, geom)?;
    let s = meas.shape();
    let nb = geom.num_blocks();
    if s.c != 1 || s.h != nb || s.w != m {
        return Err(Error::shape(
            "block_adjoint",
            format!("measurements {} for {} blocks of {} values", s, nb, m),
        ));
    }
    let n = geom.block_len();
    let plane = geom.padded_height * geom.padded_width;
    let mut blocks = vec![T::zero(); nb * n];
    let mut out = vec![T::zero(); s.n * plane];
    for b in 0..s.n {
        // V (nb x N) = Y (nb x M) * Φ
        T::gemm(
            nb,
            m,
            n,
            T::one(),
            &meas.data()[b * nb * m..(b + 1) * nb * m],
            m as isize,
            1,
            phi.data(),
            n as isize,
            1,
            T::zero(),
            &mut blocks,
            n as isize,
            1,
        );
        scatter_blocks(&blocks, geom, &mut out[b * plane..(b + 1) * plane]);
    }
    Ok(Tensor::from_op(
        Shape::new(s.n, 1, geom.padded_height, geom.padded_width),
        out,
        Op::BlockAdjoint {
            meas: meas.clone(),
            phi: phi.clone(),
            geom: *geom,
        },
    ))
}
