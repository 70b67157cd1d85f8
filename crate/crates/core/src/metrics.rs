//! Image quality and measurement consistency.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::numerics::Tensor;
use crate::operators::GuidanceLoss;

/// `10·log10(peak² / mse)`; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_mismatch("psnr", a.shape(), b.shape()));
    }
    if !(peak > 0.0) {
        return Err(Error::InvalidParameter(format!("psnr peak must be positive, got {peak}")));
    }
    if a.is_empty() {
        return Err(Error::InvalidParameter("psnr of empty images".into()));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimOptions {
    /// Side of the square uniform window.
    pub window: usize,
    pub peak: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimOptions {
    fn default() -> Self {
        Self { window: 8, peak: 1.0, k1: 0.01, k2: 0.03 }
    }
}

/// Summed-area table with a zero border: `s[(y+1)(w+1) + x+1] = Σ_{≤y,≤x}`.
fn integral(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += plane[y * w + x];
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

fn box_sum(s: &[f64], w: usize, y: usize, x: usize, k: usize) -> f64 {
    let w1 = w + 1;
    s[(y + k) * w1 + x + k] - s[y * w1 + x + k] - s[(y + k) * w1 + x] + s[y * w1 + x]
}

/// Mean SSIM over every `window × window` position of every channel, using
/// population moments inside each window. Images are `[H, W]` or `[C, H, W]`.
pub fn ssim(a: &Tensor, b: &Tensor, opts: &SsimOptions) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_mismatch("ssim", a.shape(), b.shape()));
    }
    let (c, h, w) = match *a.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(shape_mismatch("ssim", &[0, 0, 0], a.shape())),
    };
    let k = opts.window;
    if k == 0 || h < k || w < k {
        return Err(Error::InvalidParameter(format!("image {h}x{w} is smaller than the {k}x{k} window")));
    }
    let c1 = (opts.k1 * opts.peak).powi(2);
    let c2 = (opts.k2 * opts.peak).powi(2);
    let n = (k * k) as f64;
    let mut total = 0.0;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        let prod = |f: fn(f64, f64) -> f64| pa.iter().zip(pb).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
        let sa = integral(pa, h, w);
        let sb = integral(pb, h, w);
        let saa = integral(&prod(|x, _| x * x), h, w);
        let sbb = integral(&prod(|_, y| y * y), h, w);
        let sab = integral(&prod(|x, y| x * y), h, w);
        for y in 0..=h - k {
            for x in 0..=w - k {
                let ma = box_sum(&sa, w, y, x, k) / n;
                let mb = box_sum(&sb, w, y, x, k) / n;
                let va = box_sum(&saa, w, y, x, k) / n - ma * ma;
                let vb = box_sum(&sbb, w, y, x, k) / n - mb * mb;
                let cov = box_sum(&sab, w, y, x, k) / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
    }
    Ok(total / (c * (h - k + 1) * (w - k + 1)) as f64)
}

/// Guidance loss per measurement entry; for a linear loss this is the mean
/// squared measurement error.
pub fn residual(loss: &GuidanceLoss, x: &Tensor) -> Result<f64> {
    Ok(loss.value(x)? / loss.measurement_len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (0 for fewer than two values).
    pub std: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let count = values.len();
        if count == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, count };
        }
        let mean = values.iter().sum::<f64>() / count as f64;
        let std = if count > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, count }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub seed: u64,
    pub psnr: f64,
    pub ssim: f64,
    pub residual: f64,
}

impl SampleMetrics {
    /// Metrics of `restored` against `truth` (both in `[0, 1]`); `residual` is
    /// supplied by the caller since it lives in the loss's own units.
    pub fn compute(seed: u64, restored: &Tensor, truth: &Tensor, residual: f64) -> Result<Self> {
        let opts = SsimOptions::default();
        Ok(Self {
            seed,
            psnr: psnr(restored, truth, opts.peak)?,
            ssim: ssim(restored, truth, &opts)?,
            residual,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: Vec<SampleMetrics>,
    pub psnr: Summary,
    pub ssim: Summary,
    pub residual: Summary,
}

impl MetricReport {
    pub fn from_samples(samples: Vec<SampleMetrics>) -> Self {
        let col = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).collect::<Vec<_>>();
        Self {
            psnr: Summary::of(&col(|s| s.psnr)),
            ssim: Summary::of(&col(|s| s.ssim)),
            residual: Summary::of(&col(|s| s.residual)),
            samples,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["row", "psnr", "ssim", "residual"])?;
        for s in &self.samples {
            w.write_record([s.seed.to_string(), s.psnr.to_string(), s.ssim.to_string(), s.residual.to_string()])?;
        }
        let stats: [(&str, fn(&Summary) -> f64); 2] = [("mean", |s| s.mean), ("std", |s| s.std)];
        for (name, f) in stats {
            w.write_record([name.to_string(), f(&self.psnr).to_string(), f(&self.ssim).to_string(), f(&self.residual).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}
