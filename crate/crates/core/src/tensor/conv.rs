//! im2col convolution kernels.

use super::{Real, Shape};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeom {
    pub fn new(input: Shape, weight: Shape, stride: usize, padding: usize) -> Option<Self> {
        let k = weight.h;
        let ph = input.h + 2 * padding;
        let pw = input.w + 2 * padding;
        if stride == 0 || ph < k || pw < k {
            return None;
        }
        Some(ConvGeom {
            cin: input.c,
            h: input.h,
            w: input.w,
            cout: weight.n,
            k,
            stride,
            padding,
            hout: (ph - k) / stride + 1,
            wout: (pw - k) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.hout * self.wout
    }

    /// 1x1, stride 1, no padding: the input already is its own column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kj - padding` is inside the image.
fn valid_range(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let (s, p) = (g.stride, g.padding);
    let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
    let hi = if g.w + p > kj { ((g.w + p - kj - 1) / s + 1).min(g.wout) } else { 0 };
    (lo.min(hi), hi)
}

/// Fills `cols` with the `(cin k k) x (hout wout)` patch matrix of one sample.
fn im2col<T: Real>(g: &ConvGeom, input: &[T], cols: &mut Vec<T>) {
    cols.clear();
    let zero = T::zero();
    for c in 0..g.cin {
        let src = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let (lo, hi) = valid_range(g, kj);
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        cols.extend(std::iter::repeat_n(zero, g.wout));
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let ix0 = lo * g.stride + kj - g.padding;
                    cols.extend(std::iter::repeat_n(zero, lo));
                    if g.stride == 1 {
                        cols.extend_from_slice(&src_row[ix0..ix0 + hi - lo]);
                    } else {
                        cols.extend((0..hi - lo).map(|i| src_row[ix0 + i * g.stride]));
                    }
                    cols.extend(std::iter::repeat_n(zero, g.wout - hi));
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeom, cols: &[T], out: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let dst = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_range(g, kj);
                if lo >= hi {
                    continue;
                }
                let ix0 = lo * g.stride + kj - g.padding;
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.wout + lo..oy * g.wout + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst_row[ix0..ix0 + hi - lo].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (i, &v) in line.iter().enumerate() {
                            dst_row[ix0 + i * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Real>(
    g: &ConvGeom,
    batch: usize,
    input: &[T],
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let plane = g.out_plane();
    let kk = g.patch_len();
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * plane;
    // start from the bias; the products are accumulated on top
    let mut out = Vec::with_capacity(batch * out_len);
    for _ in 0..batch {
        for &b in &bias[..g.cout] {
            out.extend(std::iter::repeat_n(b, plane));
        }
    }
    let mut cols = Vec::with_capacity(if g.is_pointwise() { 0 } else { kk * plane });
    for b in 0..batch {
        let x = &input[b * in_len..(b + 1) * in_len];
        let y = &mut out[b * out_len..(b + 1) * out_len];
        let cols_ref: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(g, x, &mut cols);
            &cols
        };
        T::gemm(
            g.cout,
            kk,
            plane,
            T::one(),
            weight,
            kk as isize,
            1,
            cols_ref,
            plane as isize,
            1,
            T::one(),
            y,
            plane as isize,
            1,
        );
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Real>(
    g: &ConvGeom,
    batch: usize,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let plane = g.out_plane();
    let kk = g.patch_len();
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * plane;

    let mut d_input = need_input.then(|| vec![T::zero(); batch * in_len]);
    let mut d_weight = need_weight.then(|| vec![T::zero(); g.cout * kk]);
    let mut d_bias = need_bias.then(|| vec![T::zero(); g.cout]);
    let mut cols = Vec::with_capacity(if g.is_pointwise() { 0 } else { kk * plane });
    let mut d_cols = vec![T::zero(); if need_input { kk * plane } else { 0 }];

    for b in 0..batch {
        let dy = &grad_out[b * out_len..(b + 1) * out_len];
        if let Some(db) = d_bias.as_mut() {
            for (co, chunk) in dy.chunks(plane).enumerate() {
                let s: f64 = chunk.iter().map(|v| v.as_f64()).sum();
                db[co] += T::from_f64(s);
            }
        }
        if let Some(dw) = d_weight.as_mut() {
            let x = &input[b * in_len..(b + 1) * in_len];
            let cols_ref: &[T] = if g.is_pointwise() {
                x
            } else {
                im2col(g, x, &mut cols);
                &cols
            };
            // dW += dY * cols^T
            T::gemm(
                g.cout,
                plane,
                kk,
                T::one(),
                dy,
                plane as isize,
                1,
                cols_ref,
                1,
                plane as isize,
                T::one(),
                dw,
                kk as isize,
                1,
            );
        }
        if let Some(dx) = d_input.as_mut() {
            let dx = &mut dx[b * in_len..(b + 1) * in_len];
            // dcols = W^T * dY
            if g.is_pointwise() {
                T::gemm(
                    kk,
                    g.cout,
                    plane,
                    T::one(),
                    weight,
                    1,
                    kk as isize,
                    dy,
                    plane as isize,
                    1,
                    T::zero(),
                    dx,
                    plane as isize,
                    1,
                );
            } else {
                T::gemm(
                    kk,
                    g.cout,
                    plane,
                    T::one(),
                    weight,
                    1,
                    kk as isize,
                    dy,
                    plane as isize,
                    1,
                    T::zero(),
                    &mut d_cols,
                    plane as isize,
                    1,
                );
                col2im(g, &d_cols, dx);
            }
        }
    }
    ConvGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    }
}
