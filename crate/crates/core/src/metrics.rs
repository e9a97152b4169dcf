//! PSNR and SSIM on `[0, 1]` images.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_core::{load_image, ImageBuffer, Mask};
use crate::synthesizer::DatasetManifest;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Mean squared error over all samples.
pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.check_same_shape(b)?;
    let n = a.data().len().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// PSNR restricted to the pixels set in `mask` (all channels).
pub fn psnr_masked(a: &ImageBuffer, b: &ImageBuffer, mask: &Mask) -> Result<f64> {
    a.check_same_shape(b)?;
    if (mask.width(), mask.height()) != (a.width(), a.height()) {
        return Err(Error::shape(
            format!("{}x{} mask", a.width(), a.height()),
            format!("{}x{} mask", mask.width(), mask.height()),
        ));
    }
    let ch = a.channels();
    let (mut sum, mut n) = (0.0, 0usize);
    for (pixel, &keep) in mask.data().iter().enumerate() {
        if keep {
            for c in pixel * ch..(pixel + 1) * ch {
                let d = a.data()[c] - b.data()[c];
                sum += d * d;
            }
            n += ch;
        }
    }
    if n == 0 {
        return Err(Error::InvalidImage("mask selects no pixels".into()));
    }
    Ok(psnr_from_mse(sum / n as f64))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable "valid" Gaussian filtering of a single-channel plane.
fn filter_valid(plane: &[f64], width: usize, height: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = width - SSIM_WINDOW + 1;
    let oh = height - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0; ow * height];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for x in 0..ow {
            horiz[y * ow + x] = kernel.iter().zip(&row[x..x + SSIM_WINDOW]).map(|(k, v)| k * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * horiz[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean single-scale SSIM (11x11 Gaussian window, sigma 1.5, K1 = 0.01,
/// K2 = 0.03) over all fully-contained windows. RGB inputs are compared on
/// BT.601 luma.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.check_same_shape(b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidImage(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let (la, lb) = (a.to_luma(), b.to_luma());
    let (x, y) = (la.data(), lb.data());
    let kernel = gaussian_kernel();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
    let [mx, my, sxx, syy, sxy] = [x, y, &xx[..], &yy[..], &xy[..]].map(|p| filter_valid(p, w, h, &kernel));

    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ma, mb) = (mx[i], my[i]);
            let va = sxx[i] - ma * ma;
            let vb = syy[i] - mb * mb;
            let cov = sxy[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MetricReport {
    pub samples: Vec<SampleMetrics>,
    /// Records without a rectified counterpart.
    pub missing: Vec<String>,
}

impl MetricReport {
    pub fn summary(&self) -> MetricSummary {
        let n = self.samples.len();
        let mean = |f: fn(&SampleMetrics) -> f64| {
            if n == 0 {
                f64::NAN
            } else {
                self.samples.iter().map(f).sum::<f64>() / n as f64
            }
        };
        MetricSummary {
            mean_psnr: mean(|s| s.psnr),
            mean_ssim: mean(|s| s.ssim),
            count: n,
        }
    }

    /// CSV with columns `id,psnr,ssim`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr,ssim\n");
        for s in &self.samples {
            out.push_str(&format!("{},{:.6},{:.6}\n", s.id, s.psnr, s.ssim));
        }
        out
    }
}

/// Crops `margin` pixels from every side.
fn crop(img: &ImageBuffer, margin: usize) -> ImageBuffer {
    if margin == 0 {
        return img.clone();
    }
    let w = img.width().saturating_sub(2 * margin);
    let h = img.height().saturating_sub(2 * margin);
    ImageBuffer::from_fn(w, h, img.channels(), |x, y, c| img.get(x + margin, y + margin, c))
}

/// Scores `rectified_dir/<id>.png` against each record's ground truth.
///
/// Missing files are listed in the report and skipped; paths in the
/// manifest are resolved against `manifest_dir`.
pub fn evaluate_manifest(
    manifest: &DatasetManifest,
    manifest_dir: &Path,
    rectified_dir: &Path,
    interior_margin: usize,
) -> Result<MetricReport> {
    let results: Vec<Option<SampleMetrics>> = manifest
        .records
        .par_iter()
        .map(|rec| -> Result<Option<SampleMetrics>> {
            let candidate: PathBuf = rectified_dir.join(format!("{}.png", rec.id));
            if !candidate.exists() {
                return Ok(None);
            }
            let rect = crop(&load_image(&candidate)?, interior_margin);
            let gt = crop(&load_image(manifest_dir.join(&rec.gt_image))?, interior_margin);
            Ok(Some(SampleMetrics {
                id: rec.id.clone(),
                psnr: psnr(&rect, &gt)?,
                ssim: ssim(&rect, &gt)?,
            }))
        })
        .collect::<Result<_>>()?;

    let mut report = MetricReport::default();
    for (rec, r) in manifest.records.iter().zip(results) {
        match r {
            Some(s) => report.samples.push(s),
            None => {
                log::warn!("no rectified image for {}", rec.id);
                report.missing.push(rec.id.clone());
            }
        }
    }
    Ok(report)
}
