//! Photographic statistics and image-quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{gaussian_kernel, rgb_to_yuv, Image};

pub const HIST_BINS: usize = 32;

/// PSNR reported for identical images (and the upper bound of every PSNR).
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelSet {
    Rgb,
    Y,
    Uv,
}

impl ChannelSet {
    pub fn channel_count(self) -> usize {
        match self {
            ChannelSet::Rgb => 3,
            ChannelSet::Y => 1,
            ChannelSet::Uv => 2,
        }
    }
}

/// Per-channel normalized 32-bin histogram.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub channel_set: ChannelSet,
    pub bins: Vec<[f64; HIST_BINS]>,
}

impl Histogram {
    /// All channels concatenated, channel-major.
    pub fn flat(&self) -> Vec<f64> {
        self.bins.iter().flat_map(|b| b.iter().copied()).collect()
    }
}

/// Bin of a value in `[0, 1]`: `floor(v·32)` clamped to the last bin.
#[inline]
pub fn bin_index(v: f64) -> usize {
    ((v * HIST_BINS as f64).floor().max(0.0) as usize).min(HIST_BINS - 1)
}

pub fn histogram(img: &Image, channel_set: ChannelSet) -> Histogram {
    let planes: Vec<Vec<f64>> = match channel_set {
        ChannelSet::Rgb => (0..3).map(|c| img.pixels().map(|p| p[c]).collect()).collect(),
        ChannelSet::Y => vec![img.luminance_plane()],
        ChannelSet::Uv => {
            let yuv = rgb_to_yuv(img);
            vec![
                yuv.u.iter().map(|u| u + 0.5).collect(),
                yuv.v.iter().map(|v| v + 0.5).collect(),
            ]
        }
    };
    let n = img.pixel_count() as f64;
    let bins = planes
        .iter()
        .map(|plane| {
            let mut counts = [0u64; HIST_BINS];
            for &v in plane {
                counts[bin_index(v)] += 1;
            }
            counts.map(|c| c as f64 / n)
        })
        .collect();
    Histogram { channel_set, bins }
}

/// Scalar photo statistics over the luminance plane plus mean chroma spread.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarStats {
    pub mean_luminance: f64,
    pub median_luminance: f64,
    pub rms_contrast: f64,
    pub mean_saturation: f64,
}

impl ScalarStats {
    pub fn to_array(&self) -> [f64; 4] {
        [
            self.mean_luminance,
            self.median_luminance,
            self.rms_contrast,
            self.mean_saturation,
        ]
    }
}

pub fn scalar_stats(img: &Image) -> ScalarStats {
    let mut y = img.luminance_plane();
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    y.sort_by(f64::total_cmp);
    let mid = y.len() / 2;
    let median = if y.len() % 2 == 1 {
        y[mid]
    } else {
        0.5 * (y[mid - 1] + y[mid])
    };
    let sat = img
        .pixels()
        .map(|p| p[0].max(p[1]).max(p[2]) - p[0].min(p[1]).min(p[2]))
        .sum::<f64>()
        / n;
    ScalarStats {
        mean_luminance: mean.clamp(0.0, 1.0),
        median_luminance: median.clamp(0.0, 1.0),
        rms_contrast: var.sqrt().clamp(0.0, 1.0),
        mean_saturation: sat.clamp(0.0, 1.0),
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_dims(b, "mse")?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data().len() as f64)
}

/// Peak signal-to-noise ratio with unit peak, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

/// Valid-mode separable filtering of a single plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM on the luminance plane with an 11×11 Gaussian window (σ = 1.5).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_dims(b, "ssim")?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::arg(format!(
            "ssim needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let mut k = gaussian_kernel(SSIM_SIGMA);
    // radius ceil(3σ) = 5 gives exactly the 11-tap window
    debug_assert_eq!(k.len(), SSIM_WINDOW);
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);

    let ya = a.luminance_plane();
    let yb = b.luminance_plane();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let mu_a = filter_valid(&ya, h, w, &k);
    let mu_b = filter_valid(&yb, h, w, &k);
    let e_aa = filter_valid(&prod(&ya, &ya), h, w, &k);
    let e_bb = filter_valid(&prod(&yb, &yb), h, w, &k);
    let e_ab = filter_valid(&prod(&ya, &yb), h, w, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}
