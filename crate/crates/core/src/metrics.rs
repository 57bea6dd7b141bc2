//! Frame quality metrics and the per-frame report.
//!
//! All metrics clamp both inputs to `[0, 1]` first. SSIM uses an 11×11
//! Gaussian window (σ = 1.5), `K1 = 0.01`, `K2 = 0.03`, dynamic range 1, and
//! averages the SSIM map over window positions that fit entirely inside the
//! frame.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::segmentation::FrameSequence;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const PSNR_CAP_DB: f64 = 100.0;

#[inline]
fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn same_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim(op, format!("{} vs {} values", a.len(), b.len())));
    }
    Ok(())
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    same_len("mse", pred, target)?;
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = clamp01(p) - clamp01(t);
            d * d
        })
        .sum();
    Ok(s / pred.len() as f64)
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    same_len("mae", pred, target)?;
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| (clamp01(p) - clamp01(t)).abs())
        .sum();
    Ok(s / pred.len() as f64)
}

/// `10·log10(range² / mse)`, capped at 100 dB once `mse < 1e-10`.
pub fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP_DB
    } else {
        10.0 * math::log10(data_range * data_range / mse)
    }
}

pub fn psnr(pred: &[f64], target: &[f64], data_range: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, target)?, data_range))
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            math::exp(-d * d / (2.0 * sigma * sigma))
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-mode separable filtering of an `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps
                .iter()
                .zip(&plane[y * w + x..y * w + x + k])
                .map(|(t, v)| t * v)
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, taps: &[f64]) -> f64 {
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, h, w, taps);
    let mu_b = filter_valid(b, h, w, taps);
    let e_aa = filter_valid(&aa, h, w, taps);
    let e_bb = filter_valid(&bb, h, w, taps);
    let e_ab = filter_valid(&ab, h, w, taps);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
    }
    total / n as f64
}

/// Mean SSIM of a `C×H×W` frame pair, averaged over channels.
pub fn ssim(pred: &[f64], target: &[f64], channels: usize, height: usize, width: usize) -> Result<f64> {
    same_len("ssim", pred, target)?;
    if pred.len() != channels * height * width {
        return Err(Error::dim(
            "ssim",
            format!("{} values for a {channels}×{height}×{width} frame", pred.len()),
        ));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::config(format!(
            "{height}×{width} frame is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} SSIM window"
        )));
    }
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let hw = height * width;
    let mut total = 0.0;
    for c in 0..channels {
        let a: Vec<f64> = pred[c * hw..(c + 1) * hw].iter().map(|&v| clamp01(v)).collect();
        let b: Vec<f64> = target[c * hw..(c + 1) * hw].iter().map(|&v| clamp01(v)).collect();
        total += ssim_plane(&a, &b, height, width, &taps);
    }
    Ok(total / channels as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FrameMetrics {
    pub mse: f64,
    pub mae: f64,
    pub ssim: f64,
    pub psnr: f64,
}

impl FrameMetrics {
    pub fn compute(pred: &[f64], target: &[f64], channels: usize, height: usize, width: usize) -> Result<Self> {
        let m = mse(pred, target)?;
        Ok(Self {
            mse: m,
            mae: mae(pred, target)?,
            ssim: ssim(pred, target, channels, height, width)?,
            psnr: psnr_from_mse(m, 1.0),
        })
    }

    fn add(&mut self, o: &FrameMetrics) {
        self.mse += o.mse;
        self.mae += o.mae;
        self.ssim += o.ssim;
        self.psnr += o.psnr;
    }

    fn scaled(mut self, f: f64) -> Self {
        self.mse *= f;
        self.mae *= f;
        self.ssim *= f;
        self.psnr *= f;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportMeta {
    pub model: String,
    pub dataset_hash: String,
    pub delta_t: Option<usize>,
    pub delta_big: Option<usize>,
    pub observed: usize,
    pub samples: usize,
    /// Pixels per frame (`C·H·W`); multiply a per-pixel MSE/MAE by this to
    /// obtain per-frame sums.
    pub pixels_per_frame: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Metrics of each predicted frame index, averaged over samples.
    pub per_frame: Vec<FrameMetrics>,
    /// Mean of `per_frame`.
    pub aggregate: FrameMetrics,
    pub meta: ReportMeta,
}

impl MetricsReport {
    pub fn from_per_frame(per_frame: Vec<FrameMetrics>, meta: ReportMeta) -> Result<Self> {
        if per_frame.is_empty() {
            return Err(Error::contract("report needs at least one frame"));
        }
        let mut sum = FrameMetrics::default();
        for f in &per_frame {
            sum.add(f);
        }
        let aggregate = sum.scaled(1.0 / per_frame.len() as f64);
        Ok(Self {
            per_frame,
            aggregate,
            meta,
        })
    }
}

/// Per-frame metrics of predicted against ground-truth sequences, averaged
/// over samples in index order.
pub fn frame_report(preds: &[FrameSequence], targets: &[FrameSequence], mut meta: ReportMeta) -> Result<MetricsReport> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::contract(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let len = targets[0].len();
    let (c, h, w) = targets[0].frame_shape();
    let mut sums = vec![FrameMetrics::default(); len];
    for (p, t) in preds.iter().zip(targets) {
        if p.len() != len || t.len() != len {
            return Err(Error::contract(format!(
                "prediction of {} frames against target of {} (expected {len})",
                p.len(),
                t.len()
            )));
        }
        if p.frame_shape() != (c, h, w) || t.frame_shape() != (c, h, w) {
            return Err(Error::dim("frame_report", "frame shapes differ"));
        }
        for (f, sum) in sums.iter_mut().enumerate() {
            sum.add(&FrameMetrics::compute(p.frame(f), t.frame(f), c, h, w)?);
        }
    }
    let n = preds.len() as f64;
    meta.samples = preds.len();
    meta.pixels_per_frame = c * h * w;
    MetricsReport::from_per_frame(sums.into_iter().map(|s| s.scaled(1.0 / n)).collect(), meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_mae_examples() {
        assert_eq!(mse(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        assert_eq!(mae(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        assert_eq!(mse(&[1.0; 4], &[0.0; 4]).unwrap(), 1.0);
        assert_eq!(mae(&[1.0; 4], &[0.0; 4]).unwrap(), 1.0);
        assert_eq!(mse(&[0.0, 0.5], &[1.0, 0.5]).unwrap(), 0.5);
        assert_eq!(mae(&[0.0, 0.5], &[1.0, 0.5]).unwrap(), 0.5);
        assert!(mse(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn clamps_before_comparing() {
        assert_eq!(mse(&[1.7, -0.2], &[1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn psnr_examples() {
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-9);
        assert_eq!(psnr_from_mse(1.0, 1.0), 0.0);
        assert_eq!(psnr(&[0.2; 8], &[0.2; 8], 1.0).unwrap(), 100.0);
    }

    #[test]
    fn ssim_identity_and_offset() {
        let img: Vec<f64> = (0..256).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        assert!((ssim(&img, &img, 1, 16, 16).unwrap() - 1.0).abs() < 1e-9);
        let gray = vec![0.5; 256];
        let brighter: Vec<f64> = gray.iter().map(|v| v + 0.5).collect();
        assert!(ssim(&brighter, &gray, 1, 16, 16).unwrap() < 1.0);
    }

    #[test]
    fn ssim_frozen_reference_values() {
        // Values from a direct 2-D window evaluation with the same constants.
        let cb: Vec<f64> = (0..256).map(|i| ((i / 16 + i % 16) % 2) as f64).collect();
        let inv: Vec<f64> = cb.iter().map(|v| 1.0 - v).collect();
        assert!((ssim(&cb, &inv, 1, 16, 16).unwrap() - -0.9964064683569566).abs() < 1e-12);
        let ramp: Vec<f64> = (0..256).map(|i| (i % 16) as f64 / 15.0).collect();
        let sheared: Vec<f64> = (0..256).map(|i| ((i % 16 + i / 16) % 16) as f64 / 15.0).collect();
        assert!((ssim(&ramp, &sheared, 1, 16, 16).unwrap() - -0.06546346917763976).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_frames() {
        assert!(matches!(ssim(&[0.0; 100], &[0.0; 100], 1, 10, 10), Err(Error::Config(_))));
    }

    #[test]
    fn window_is_normalised_and_symmetric() {
        let w = gaussian_window(11, 1.5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..11 {
            assert_eq!(w[i], w[10 - i]);
        }
    }

    #[test]
    fn report_of_identical_pair() {
        let s = FrameSequence::from_data(1, 1, 16, 16, vec![0.25; 256]).unwrap();
        let seqs = [s];
        let r = frame_report(&seqs, &seqs, ReportMeta::default()).unwrap();
        let f = r.per_frame[0];
        assert_eq!((f.mse, f.mae, f.psnr), (0.0, 0.0, 100.0));
        assert!((f.ssim - 1.0).abs() < 1e-12);
        assert_eq!(r.aggregate, f);
        assert_eq!(r.meta.pixels_per_frame, 256);
    }
}
