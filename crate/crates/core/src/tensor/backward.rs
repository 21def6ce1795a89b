//! Vector-Jacobian products for every recorded operation.

use super::conv::{self, ConvGeom};
use super::ops::{gather_blocks, permute_unshuffle, scatter_blocks, sigmoid_scalar};
use super::{Grads, Op, Real, Tensor};

pub(crate) fn propagate<T: Real>(op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut Grads<T>) {
    match op {
        Op::Add(a, b) => {
            grads.add(a, g.to_vec());
            grads.add(b, g.to_vec());
        }
        Op::Sub(a, b) => {
            grads.add(a, g.to_vec());
            if b.requires_grad() {
                grads.add(b, g.iter().map(|&v| -v).collect());
            }
        }
        Op::Mul(a, b) => {
            if a.requires_grad() {
                grads.add(a, g.iter().zip(b.data()).map(|(&d, &y)| d * y).collect());
            }
            if b.requires_grad() {
                grads.add(b, g.iter().zip(a.data()).map(|(&d, &x)| d * x).collect());
            }
        }
        Op::Scale(a, c) => grads.add(a, g.iter().map(|&v| v * *c).collect()),
        Op::AddScalar(a) => grads.add(a, g.to_vec()),
        Op::Relu(a) => grads.add(
            a,
            g.iter()
                .zip(a.data())
                .map(|(&d, &x)| if x > T::zero() { d } else { T::zero() })
                .collect(),
        ),
        Op::Sigmoid(a) => grads.add(
            a,
            g.iter()
                .zip(out.data())
                .map(|(&d, &y)| d * y * (T::one() - y))
                .collect(),
        ),
        Op::Softplus(a) => grads.add(
            a,
            g.iter()
                .zip(a.data())
                .map(|(&d, &x)| d * sigmoid_scalar(x))
                .collect(),
        ),
        Op::Sum(a) => grads.add(a, vec![g[0]; a.numel()]),
        Op::SumSquares(a) => {
            let two = T::from_f64(2.0);
            grads.add(a, a.data().iter().map(|&x| two * x * g[0]).collect());
        }
        Op::Concat(parts) => {
            let n = out.shape().n;
            let out_len = out.shape().sample_len();
            let mut offset = 0;
            for p in parts {
                let len = p.shape().sample_len();
                if p.requires_grad() {
                    let mut pg = Vec::with_capacity(p.numel());
                    for b in 0..n {
                        pg.extend_from_slice(&g[b * out_len + offset..b * out_len + offset + len]);
                    }
                    grads.add(p, pg);
                }
                offset += len;
            }
        }
        Op::GlobalAvgPool(a) => {
            let plane = a.shape().plane();
            let inv = T::from_f64(1.0 / plane as f64);
            let mut pg = Vec::with_capacity(a.numel());
            for &d in g {
                pg.extend(std::iter::repeat_n(d * inv, plane));
            }
            grads.add(a, pg);
        }
        Op::Nearest2x(a) => {
            let s = a.shape();
            let ow = 2 * s.w;
            let mut pg = vec![T::zero(); a.numel()];
            for (dst, src) in pg.chunks_mut(s.plane()).zip(g.chunks(4 * s.plane())) {
                for y in 0..2 * s.h {
                    for x in 0..ow {
                        dst[(y / 2) * s.w + x / 2] += src[y * ow + x];
                    }
                }
            }
            grads.add(a, pg);
        }
        Op::Unshuffle(a, t) => {
            grads.add(a, permute_unshuffle(g, a.shape(), *t, true));
        }
        Op::UnshuffleInv(a, t) => {
            grads.add(a, permute_unshuffle(g, out.shape(), *t, false));
        }
        Op::RepeatBatch(a) => {
            let len = a.numel();
            let mut acc = vec![0.0f64; len];
            for chunk in g.chunks(len) {
                acc.iter_mut().zip(chunk).for_each(|(s, &d)| *s += d.as_f64());
            }
            grads.add(a, acc.into_iter().map(T::from_f64).collect());
        }
        Op::ScalePerSample(x, s) => {
            let len = x.shape().sample_len();
            if x.requires_grad() {
                let pg = g
                    .chunks(len)
                    .zip(s.data())
                    .flat_map(|(chunk, &k)| chunk.iter().map(move |&d| d * k))
                    .collect();
                grads.add(x, pg);
            }
            if s.requires_grad() {
                let sg = g
                    .chunks(len)
                    .zip(x.data().chunks(len))
                    .map(|(dc, xc)| {
                        T::from_f64(
                            dc.iter()
                                .zip(xc)
                                .map(|(&d, &v)| d.as_f64() * v.as_f64())
                                .sum(),
                        )
                    })
                    .collect();
                grads.add(s, sg);
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            padding,
        } => {
            let is = input.shape();
            let geom = ConvGeom::new(is, weight.shape(), *stride, *padding)
                .expect("geometry validated in forward");
            let cg = conv::backward(
                &geom,
                is.n,
                input.data(),
                weight.data(),
                g,
                input.requires_grad(),
                weight.requires_grad(),
                bias.requires_grad(),
            );
            if let Some(d) = cg.input {
                grads.add(input, d);
            }
            if let Some(d) = cg.weight {
                grads.add(weight, d);
            }
            if let Some(d) = cg.bias {
                grads.add(bias, d);
            }
        }
        Op::BlockSample { image, phi, geom } => {
            let s = image.shape();
            let (nb, n) = (geom.num_blocks(), geom.block_len());
            let m = phi.shape().h;
            let mut d_image = image.requires_grad().then(|| vec![T::zero(); image.numel()]);
            let mut d_phi = phi.requires_grad().then(|| vec![T::zero(); phi.numel()]);
            let mut blocks = vec![T::zero(); nb * n];
            for b in 0..s.n {
                let dy = &g[b * nb * m..(b + 1) * nb * m];
                if let Some(di) = d_image.as_mut() {
                    // dV (nb x N) = dY (nb x M) * Φ
                    T::gemm(
                        nb, m, n, T::one(), dy, m as isize, 1, phi.data(), n as isize, 1,
                        T::zero(), &mut blocks, n as isize, 1,
                    );
                    scatter_blocks(&blocks, geom, &mut di[b * s.plane()..(b + 1) * s.plane()]);
                }
                if let Some(dp) = d_phi.as_mut() {
                    gather_blocks(&image.data()[b * s.plane()..(b + 1) * s.plane()], geom, &mut blocks);
                    // dΦ (M x N) += dYᵀ (M x nb) * V (nb x N)
                    T::gemm(
                        m, nb, n, T::one(), dy, 1, m as isize, &blocks, n as isize, 1,
                        T::one(), dp, n as isize, 1,
                    );
                }
            }
            if let Some(d) = d_image {
                grads.add(image, d);
            }
            if let Some(d) = d_phi {
                grads.add(phi, d);
            }
        }
        Op::BlockAdjoint { meas, phi, geom } => {
            let batch = meas.shape().n;
            let (nb, n) = (geom.num_blocks(), geom.block_len());
            let m = phi.shape().h;
            let plane = geom.padded_height * geom.padded_width;
            let mut d_meas = meas.requires_grad().then(|| vec![T::zero(); meas.numel()]);
            let mut d_phi = phi.requires_grad().then(|| vec![T::zero(); phi.numel()]);
            let mut blocks = vec![T::zero(); nb * n];
            for b in 0..batch {
                gather_blocks(&g[b * plane..(b + 1) * plane], geom, &mut blocks);
                if let Some(dm) = d_meas.as_mut() {
                    // dY (nb x M) = dV (nb x N) * Φᵀ
                    T::gemm(
                        nb, n, m, T::one(), &blocks, n as isize, 1, phi.data(), 1, n as isize,
                        T::zero(), &mut dm[b * nb * m..(b + 1) * nb * m], m as isize, 1,
                    );
                }
                if let Some(dp) = d_phi.as_mut() {
                    // dΦ (M x N) += Yᵀ (M x nb) * dV (nb x N)
                    T::gemm(
                        m, nb, n, T::one(), &meas.data()[b * nb * m..(b + 1) * nb * m], 1,
                        m as isize, &blocks, n as isize, 1, T::one(), dp, n as isize, 1,
                    );
                }
            }
            if let Some(d) = d_meas {
                grads.add(meas, d);
            }
            if let Some(d) = d_phi {
                grads.add(phi, d);
            }
        }
    }
}
