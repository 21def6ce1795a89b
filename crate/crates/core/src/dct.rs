//! Orthonormal 2-D DCT-II applied independently to every `B x B` block.

/// Precomputed DCT-II basis for one block size.
#[derive(Clone, Debug)]
pub struct BlockDct {
    size: usize,
    /// `basis[k * size + n] = a_k cos(π (2n + 1) k / 2B)`.
    basis: Vec<f64>,
}

impl BlockDct {
    pub fn new(size: usize) -> Self {
        let b = size as f64;
        let mut basis = vec![0.0; size * size];
        for k in 0..size {
            let a = if k == 0 { (1.0 / b).sqrt() } else { (2.0 / b).sqrt() };
            for n in 0..size {
                basis[k * size + n] =
                    a * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / (2.0 * b)).cos();
            }
        }
        BlockDct { size, basis }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// `C X Cᵀ` of one row-major block, written to `out`.
    pub fn forward_block(&self, x: &[f64], out: &mut [f64]) {
        self.apply(x, out, false);
    }

    /// `Cᵀ X C`, the inverse of [`forward_block`](Self::forward_block).
    pub fn inverse_block(&self, x: &[f64], out: &mut [f64]) {
        self.apply(x, out, true);
    }

    fn apply(&self, x: &[f64], out: &mut [f64], transpose: bool) {
        let n = self.size;
        let c = |i: usize, j: usize| {
            if transpose {
                self.basis[j * n + i]
            } else {
                self.basis[i * n + j]
            }
        };
        // tmp = C X
        let mut tmp = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let cik = c(i, k);
                if cik == 0.0 {
                    continue;
                }
                let row = &x[k * n..(k + 1) * n];
                for (t, &v) in tmp[i * n..(i + 1) * n].iter_mut().zip(row) {
                    *t += cik * v;
                }
            }
        }
        // out = tmp Cᵀ
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = (0..n).map(|k| tmp[i * n + k] * c(j, k)).sum();
            }
        }
    }

    /// Forward transform of every block in a `num_blocks x B²` stack.
    pub fn forward_stack(&self, blocks: &[f64]) -> Vec<f64> {
        let len = self.size * self.size;
        let mut out = vec![0.0; blocks.len()];
        for (src, dst) in blocks.chunks(len).zip(out.chunks_mut(len)) {
            self.forward_block(src, dst);
        }
        out
    }

    pub fn inverse_stack(&self, coeffs: &[f64]) -> Vec<f64> {
        let len = self.size * self.size;
        let mut out = vec![0.0; coeffs.len()];
        for (src, dst) in coeffs.chunks(len).zip(out.chunks_mut(len)) {
            self.inverse_block(src, dst);
        }
        out
    }
}
