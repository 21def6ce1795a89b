//! Image quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

fn check_same(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::shape(
            op,
            format!(
                "{}x{} vs {}x{}",
                a.width(),
                a.height(),
                b.width(),
                b.height()
            ),
        ));
    }
    Ok(())
}

pub fn mse(x: &Image, x_hat: &Image) -> Result<f64> {
    check_same("mse", x, x_hat)?;
    let n = x.data().len().max(1) as f64;
    Ok(x.data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `10 log10(peak² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(x: &Image, x_hat: &Image, peak: f64) -> Result<f64> {
    let e = mse(x, x_hat)?;
    if e == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / e).log10()).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable filtering over every fully contained window position.
fn filter_valid(data: &[f64], w: usize, h: usize, kx: &[f64], ky: &[f64]) -> (Vec<f64>, usize, usize) {
    let ow = w + 1 - kx.len();
    let oh = h + 1 - ky.len();
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = kx.iter().enumerate().map(|(i, k)| k * data[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = ky.iter().enumerate().map(|(i, k)| k * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean structural similarity with an 11x11 Gaussian window (σ = 1.5),
/// `C1 = (0.01 peak)²`, `C2 = (0.03 peak)²`. The window shrinks to the
/// image size along any side shorter than 11 pixels.
pub fn ssim(x: &Image, x_hat: &Image, peak: f64) -> Result<f64> {
    check_same("ssim", x, x_hat)?;
    let (w, h) = (x.width(), x.height());
    if w == 0 || h == 0 {
        return Err(Error::invalid("ssim of an empty image"));
    }
    let kx = gaussian_window(SSIM_WINDOW.min(w), SSIM_SIGMA);
    let ky = gaussian_window(SSIM_WINDOW.min(h), SSIM_SIGMA);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);

    let a = x.data();
    let b = x_hat.data();
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&p, &q)| f(p, q)).collect() };
    let (mu_a, ow, oh) = filter_valid(a, w, h, &kx, &ky);
    let (mu_b, ..) = filter_valid(b, w, h, &kx, &ky);
    let (e_aa, ..) = filter_valid(&prod(&|p, _| p * p), w, h, &kx, &ky);
    let (e_bb, ..) = filter_valid(&prod(&|_, q| q * q), w, h, &kx, &ky);
    let (e_ab, ..) = filter_valid(&prod(&|p, q| p * q), w, h, &kx, &ky);

    let mut total = 0.0;
    for i in 0..ow * oh {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / (ow * oh) as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    /// PSNR of the estimate after each phase (or solver checkpoint).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub phase_psnr: Vec<f64>,
}

impl MetricReport {
    pub fn compute(x: &Image, x_hat: &Image, phases: &[Image]) -> Result<Self> {
        Ok(MetricReport {
            psnr: psnr(x, x_hat, 1.0)?,
            ssim: ssim(x, x_hat, 1.0)?,
            phase_psnr: phases
                .iter()
                .map(|p| psnr(x, p, 1.0))
                .collect::<Result<Vec<_>>>()?,
        })
    }
}
