//! Block-based compressed sampling.
//!
//! Images are zero-padded on the right and bottom to a multiple of the block
//! size `B` and cut into non-overlapping `B x B` blocks in row-major block
//! order. Every block is vectorized row-major into `N = B²` values and
//! measured independently with the same `M x N` matrix Φ.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scale_space::MultiScaleState;
use crate::tensor::{self, Real, Shape, Tensor};

/// Block size used throughout, giving N = 1024.
pub const DEFAULT_BLOCK: usize = 32;

/// Number of measurements for a sampling ratio: `floor(ratio * N)`.
pub fn measurements_for(ratio: f64, n: usize) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!(
            "sampling ratio must lie in (0, 1], got {ratio}"
        )));
    }
    // The small offset keeps products such as 0.3 * 1000 from landing just under an integer.
    let m = (ratio * n as f64 + 1e-9).floor() as usize;
    if m == 0 {
        return Err(Error::invalid(format!(
            "ratio {ratio} yields no measurements for N = {n}"
        )));
    }
    Ok(m.min(n))
}

/// Original and padded size of an image cut into blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGeometry {
    pub height: usize,
    pub width: usize,
    pub block: usize,
    pub padded_height: usize,
    pub padded_width: usize,
}

impl BlockGeometry {
    pub fn new(height: usize, width: usize, block: usize) -> Result<Self> {
        if block == 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "degenerate geometry {height}x{width} with block {block}"
            )));
        }
        Ok(BlockGeometry {
            height,
            width,
            block,
            padded_height: height.div_ceil(block) * block,
            padded_width: width.div_ceil(block) * block,
        })
    }

    pub fn blocks_down(&self) -> usize {
        self.padded_height / self.block
    }

    pub fn blocks_across(&self) -> usize {
        self.padded_width / self.block
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks_down() * self.blocks_across()
    }

    /// N, the length of a vectorized block.
    pub fn block_len(&self) -> usize {
        self.block * self.block
    }
}

/// Measurement matrix Φ (`M x N`, row-major) for one block size.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingOperator {
    phi: Vec<f64>,
    rows: usize,
    block: usize,
    learned: bool,
    seed: Option<u64>,
}

impl SamplingOperator {
    /// Φ with orthonormal rows: i.i.d. Gaussian rows passed through
    /// Gram–Schmidt. Deterministic per seed. `n` must be a perfect square.
    pub fn orthogonalized_gaussian(m: usize, n: usize, seed: u64) -> Result<Self> {
        let block = (n as f64).sqrt().round() as usize;
        if block * block != n {
            return Err(Error::invalid(format!("N = {n} is not a square block")));
        }
        if m == 0 || m > n {
            return Err(Error::invalid(format!(
                "need 1 <= M <= N, got M = {m}, N = {n}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut phi: Vec<f64> = (0..m * n).map(|_| StandardNormal.sample(&mut rng)).collect();
        orthonormalize_rows(&mut phi, m, n)?;
        Ok(SamplingOperator {
            phi,
            rows: m,
            block,
            learned: false,
            seed: Some(seed),
        })
    }

    /// Orthogonalized Gaussian Φ for a block size and sampling ratio.
    pub fn for_ratio(ratio: f64, block: usize, seed: u64) -> Result<Self> {
        let n = block * block;
        Self::orthogonalized_gaussian(measurements_for(ratio, n)?, n, seed)
    }

    /// Wraps an arbitrary `m x block²` matrix.
    pub fn from_matrix(m: usize, block: usize, phi: Vec<f64>) -> Result<Self> {
        if m == 0 || block == 0 || phi.len() != m * block * block {
            return Err(Error::shape(
                "sampling operator",
                format!("{} entries for {}x{}", phi.len(), m, block * block),
            ));
        }
        Ok(SamplingOperator {
            phi,
            rows: m,
            block,
            learned: false,
            seed: None,
        })
    }

    /// Marks Φ as trainable. No orthogonality constraint is enforced afterwards.
    pub fn with_learned(mut self, learned: bool) -> Self {
        self.learned = learned;
        self
    }

    pub fn matrix(&self) -> &[f64] {
        &self.phi
    }

    pub fn m(&self) -> usize {
        self.rows
    }

    pub fn n(&self) -> usize {
        self.block * self.block
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn ratio(&self) -> f64 {
        self.rows as f64 / self.n() as f64
    }

    pub fn is_learned(&self) -> bool {
        self.learned
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Φ as a `(1, 1, M, N)` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_f64(Shape::new(1, 1, self.rows, self.n()), &self.phi)
            .expect("matrix size is M x N")
    }

    pub fn geometry(&self, height: usize, width: usize) -> Result<BlockGeometry> {
        BlockGeometry::new(height, width, self.block)
    }

    /// `Φ v` for one vectorized block.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n();
        self.phi.chunks(n).map(|row| dot(row, v)).collect()
    }

    /// `Φᵀ y` for one block's measurements.
    pub fn apply_t(&self, y: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut out = vec![0.0; n];
        for (row, &yi) in self.phi.chunks(n).zip(y) {
            for (o, &p) in out.iter_mut().zip(row) {
                *o += p * yi;
            }
        }
        out
    }

    /// `Φ v_b` for every row `v_b` of a row-major `(blocks, N)` matrix.
    pub fn apply_blocks(&self, blocks: &[f64]) -> Vec<f64> {
        let (m, n) = (self.m(), self.n());
        let nb = blocks.len() / n;
        let mut out = vec![0.0; nb * m];
        f64::gemm(
            nb, n, m, 1.0, blocks, n as isize, 1, &self.phi, 1, n as isize, 0.0, &mut out,
            m as isize, 1,
        );
        out
    }

    /// `Φᵀ y_b` for every row `y_b` of a row-major `(blocks, M)` matrix.
    pub fn apply_t_blocks(&self, y: &[f64]) -> Vec<f64> {
        let (m, n) = (self.m(), self.n());
        let nb = y.len() / m;
        let mut out = vec![0.0; nb * n];
        f64::gemm(
            nb, m, n, 1.0, y, m as isize, 1, &self.phi, n as isize, 1, 0.0, &mut out, n as isize,
            1,
        );
        out
    }

    /// `Φᵀ Φ v`.
    pub fn normal(&self, v: &[f64]) -> Vec<f64> {
        self.apply_t(&self.apply(v))
    }
}

/// Modified Gram–Schmidt, applied twice for numerical orthogonality.
fn orthonormalize_rows(a: &mut [f64], m: usize, n: usize) -> Result<()> {
    for _pass in 0..2 {
        for i in 0..m {
            let (done, rest) = a.split_at_mut(i * n);
            let row = &mut rest[..n];
            for j in 0..i {
                let q = &done[j * n..(j + 1) * n];
                let proj = dot(q, row);
                row.iter_mut().zip(q).for_each(|(r, &qv)| *r -= proj * qv);
            }
            let norm = dot(row, row).sqrt();
            if norm < 1e-12 {
                return Err(Error::invalid("rank-deficient Gaussian draw"));
            }
            row.iter_mut().for_each(|r| *r /= norm);
        }
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Blocks of a padded image, each vectorized row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockStack {
    pub geometry: BlockGeometry,
    /// `num_blocks x N`, row-major.
    pub data: Vec<f64>,
}

impl BlockStack {
    pub fn block(&self, index: usize) -> &[f64] {
        let n = self.geometry.block_len();
        &self.data[index * n..(index + 1) * n]
    }

    pub fn len(&self) -> usize {
        self.geometry.num_blocks()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Zero-pads to a multiple of `block` and cuts into row-major blocks.
pub fn block_unfold(image: &Image, block: usize) -> Result<BlockStack> {
    let geometry = BlockGeometry::new(image.height(), image.width(), block)?;
    let padded = image.pad_to(geometry.padded_width, geometry.padded_height)?;
    let mut data = vec![0.0; geometry.num_blocks() * geometry.block_len()];
    tensor::gather_blocks(padded.data(), &geometry, &mut data);
    Ok(BlockStack { geometry, data })
}

/// Reassembles blocks and crops the padding away.
pub fn block_fold(stack: &BlockStack) -> Result<Image> {
    fold_padded(stack)?.crop(0, 0, stack.geometry.width, stack.geometry.height)
}

fn fold_padded(stack: &BlockStack) -> Result<Image> {
    let g = &stack.geometry;
    if stack.data.len() != g.num_blocks() * g.block_len() {
        return Err(Error::shape(
            "block_fold",
            format!(
                "{} values for {} blocks of {}",
                stack.data.len(),
                g.num_blocks(),
                g.block_len()
            ),
        ));
    }
    let mut img = vec![0.0; g.padded_height * g.padded_width];
    tensor::scatter_blocks(&stack.data, g, &mut img);
    Image::new(g.padded_width, g.padded_height, img)
}

/// Block measurements of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub geometry: BlockGeometry,
    /// Measurements per block.
    pub m: usize,
    /// `num_blocks x M`, row-major.
    pub y: Vec<f64>,
}

const MEAS_MAGIC: &[u8; 7] = b"CSMEAS1";

impl Measurement {
    pub fn new(geometry: BlockGeometry, m: usize, y: Vec<f64>) -> Result<Self> {
        if y.len() != geometry.num_blocks() * m {
            return Err(Error::shape(
                "measurement",
                format!(
                    "{} values for {} blocks x {} measurements",
                    y.len(),
                    geometry.num_blocks(),
                    m
                ),
            ));
        }
        Ok(Measurement { geometry, m, y })
    }

    pub fn block(&self, index: usize) -> &[f64] {
        &self.y[index * self.m..(index + 1) * self.m]
    }

    /// `(1, 1, num_blocks, M)` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_f64(
            Shape::new(1, 1, self.geometry.num_blocks(), self.m),
            &self.y,
        )
        .expect("measurement size is num_blocks x M")
    }

    /// Binary dump: `CSMEAS1`, little-endian u32 H, W, B, M, num_blocks, then
    /// `num_blocks x M` little-endian f32 values.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let g = &self.geometry;
        w.write_all(MEAS_MAGIC)?;
        for v in [g.height, g.width, g.block, self.m, g.num_blocks()] {
            let v = u32::try_from(v)
                .map_err(|_| Error::invalid(format!("{v} does not fit a u32 header field")))?;
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in &self.y {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format("measurement file", "truncated header"))?;
        if &magic != MEAS_MAGIC {
            return Err(Error::format("measurement file", "bad magic, expected CSMEAS1"));
        }
        let mut fields = [0usize; 5];
        for f in fields.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|_| Error::format("measurement file", "truncated header"))?;
            *f = u32::from_le_bytes(b) as usize;
        }
        let [h, w, block, m, num_blocks] = fields;
        let geometry = BlockGeometry::new(h, w, block)
            .map_err(|e| Error::format("measurement file", e.to_string()))?;
        if geometry.num_blocks() != num_blocks || m == 0 || m > geometry.block_len() {
            return Err(Error::format(
                "measurement file",
                format!("inconsistent header: {h}x{w}, B={block}, M={m}, blocks={num_blocks}"),
            ));
        }
        let mut raw = Vec::new();
        r.read_to_end(&mut raw)?;
        if raw.len() != num_blocks * m * 4 {
            return Err(Error::format(
                "measurement file",
                format!(
                    "expected {} payload bytes, found {}",
                    num_blocks * m * 4,
                    raw.len()
                ),
            ));
        }
        let y = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Measurement::new(geometry, m, y)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(f)
    }
}

/// `y_b = Φ vec(b)` for every block of `x`.
pub fn sample(x: &Image, op: &SamplingOperator) -> Result<Measurement> {
    let stack = block_unfold(x, op.block())?;
    let y = (0..stack.len()).flat_map(|i| op.apply(stack.block(i))).collect();
    Measurement::new(stack.geometry, op.m(), y)
}

fn check_measurement(y: &Measurement, op: &SamplingOperator) -> Result<()> {
    if y.m != op.m() || y.geometry.block != op.block() {
        return Err(Error::shape(
            "adjoint",
            format!(
                "measurement has M = {}, B = {}; operator has M = {}, B = {}",
                y.m,
                y.geometry.block,
                op.m(),
                op.block()
            ),
        ));
    }
    Ok(())
}

/// `Φᵀ y_b` per block on the padded canvas.
pub fn adjoint_padded(y: &Measurement, op: &SamplingOperator) -> Result<Image> {
    check_measurement(y, op)?;
    let data = (0..y.geometry.num_blocks())
        .flat_map(|i| op.apply_t(y.block(i)))
        .collect();
    fold_padded(&BlockStack {
        geometry: y.geometry,
        data,
    })
}

/// `Φᵀ y_b` per block, folded and cropped to the original image size.
pub fn adjoint(y: &Measurement, op: &SamplingOperator) -> Result<Image> {
    adjoint_padded(y, op)?.crop(0, 0, y.geometry.width, y.geometry.height)
}

/// Initial multi-scale state `{S_t(Φᵀ y) : t ∈ scales}` on the padded canvas.
pub fn init_reconstruction<T: Real>(
    y: &Measurement,
    op: &SamplingOperator,
    scales: &[usize],
) -> Result<MultiScaleState<T>> {
    check_measurement(y, op)?;
    let g = &y.geometry;
    let image = tensor::block_adjoint(&y.to_tensor::<T>(), &op.to_tensor::<T>(), g)?;
    MultiScaleState::from_image(&image, scales)
}
