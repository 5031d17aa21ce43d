//! Full-reference quality metrics on 8-bit images.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimiError};
use crate::imageio::RawImage;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const PEAK: f64 = 255.0;

fn check_dims(a: &RawImage, b: &RawImage) -> Result<()> {
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels) {
        return Err(SimiError::DimensionMismatch(a.dims(), b.dims()));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over all channels.
pub fn psnr(a: &RawImage, b: &RawImage) -> Result<f64> {
    check_dims(a, b)?;
    let sse: f64 = a.data.iter().zip(&b.data).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum();
    if sse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    let mse = sse / a.data.len() as f64;
    Ok((10.0 * (PEAK * PEAK / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let total: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / total).collect();
    g.iter().flat_map(|&y| g.iter().map(move |&x| x * y)).collect()
}

fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize, window: &[f64]) -> f64 {
    let c1 = (SSIM_K1 * PEAK).powi(2);
    let c2 = (SSIM_K2 * PEAK).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - SSIM_WINDOW {
        for x in 0..=w - SSIM_WINDOW {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for wy in 0..SSIM_WINDOW {
                let row = (y + wy) * w + x;
                for wx in 0..SSIM_WINDOW {
                    let k = window[wy * SSIM_WINDOW + wx];
                    let (va, vb) = (a[row + wx], b[row + wx]);
                    ma += k * va;
                    mb += k * vb;
                    aa += k * (va * va);
                    bb += k * (vb * vb);
                    ab += k * (va * vb);
                }
            }
            let (var_a, var_b, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    total / count as f64
}

/// Mean SSIM over 11×11 Gaussian (σ = 1.5) windows, computed per channel
/// and averaged across channels.
pub fn ssim(a: &RawImage, b: &RawImage) -> Result<f64> {
    check_dims(a, b)?;
    let side = a.width.min(a.height);
    if side < SSIM_WINDOW {
        return Err(SimiError::ImageTooSmall(side));
    }
    let window = gaussian_window();
    let c = a.channels;
    let plane = |img: &RawImage, ch: usize| -> Vec<f64> { img.data.iter().skip(ch).step_by(c).map(|&v| f64::from(v)).collect() };
    let sum: f64 = (0..c).map(|ch| ssim_plane(&plane(a, ch), &plane(b, ch), a.width, a.height, &window)).sum();
    Ok(sum / c as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    pub fn from_scores(images: Vec<ImageScore>) -> Self {
        let n = images.len().max(1) as f64;
        let mean_psnr = images.iter().map(|s| s.psnr).sum::<f64>() / n;
        let mean_ssim = images.iter().map(|s| s.ssim).sum::<f64>() / n;
        Self { images, mean_psnr, mean_ssim }
    }
}
