//! Counting error (MAE, root-mean-square error) and density-map quality
//! (PSNR, SSIM).
//!
//! Following the usual crowd-counting convention the root-mean-square count
//! error is reported under the name `mse`.

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, NltError, Result};
use crate::net::{count_from_density, CounterNet, Params};
use crate::data::Sample;
use crate::tensor::Tensor;

/// Reported PSNR for a zero-error prediction.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub mae: f64,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub n_images: usize,
}

/// `(mean |y - y_hat|, sqrt(mean |y - y_hat|^2))`.
pub fn mae_mse(pred_counts: &[f64], gt_counts: &[f64]) -> Result<(f64, f64)> {
    if pred_counts.len() != gt_counts.len() {
        return Err(shape_err!(
            "{} predicted counts vs {} ground-truth counts",
            pred_counts.len(),
            gt_counts.len()
        ));
    }
    if pred_counts.is_empty() {
        return Err(NltError::InvalidArgument("no counts to compare".into()));
    }
    let n = pred_counts.len() as f64;
    let (abs, sq) = pred_counts
        .iter()
        .zip(gt_counts)
        .fold((0.0, 0.0), |(a, s), (&p, &g)| {
            let e = (g - p).abs();
            (a + e, s + e * e)
        });
    Ok((abs / n, (sq / n).sqrt()))
}

/// Divides both maps by `max(gt)` so the data range becomes 1.
fn normalized(pred: &Tensor, gt: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    if pred.shape() != gt.shape() {
        return Err(shape_err!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        ));
    }
    let peak = gt.max() as f64;
    if !(peak > 0.0) {
        return Err(NltError::InvalidArgument(
            "ground-truth density map is all zero; PSNR/SSIM are undefined".into(),
        ));
    }
    let scale = |t: &Tensor| t.data().iter().map(|&v| v as f64 / peak).collect();
    Ok((scale(pred), scale(gt)))
}

pub fn psnr(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (p, g) = normalized(pred, gt)?;
    let mse = p
        .iter()
        .zip(&g)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / p.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// SSIM between two density maps after scaling both by `1 / max(gt)`.
pub fn ssim(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (p, g) = normalized(pred, gt)?;
    let [h, w] = plane_dims(gt)?;
    ssim_planes(&p, &g, h, w, 1.0)
}

/// SSIM with an explicit data range; symmetric in its two arguments.
pub fn ssim_with_range(a: &Tensor, b: &Tensor, data_range: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    let [h, w] = plane_dims(a)?;
    let to64 = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    ssim_planes(&to64(a), &to64(b), h, w, data_range)
}

fn plane_dims(t: &Tensor) -> Result<[usize; 2]> {
    match t.shape() {
        [h, w] => Ok([*h, *w]),
        [1, h, w] | [1, 1, h, w] => Ok([*h, *w]),
        s => Err(shape_err!("expected a single-channel map, got {:?}", s)),
    }
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" Gaussian filtering of an `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
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

fn ssim_planes(a: &[f64], b: &[f64], h: usize, w: usize, data_range: f64) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(NltError::InvalidArgument(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let k = ssim_kernel();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(a, a), h, w, &k);
    let bb = filter_valid(&prod(b, b), h, w, &k);
    let ab = filter_valid(&prod(a, b), h, w, &k);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok((total / mu_a.len() as f64).clamp(-1.0, 1.0))
}

/// Metrics for precomputed density predictions, one per sample.
pub fn evaluate_predictions(preds: &[Tensor], samples: &[Sample]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(NltError::InvalidArgument("cannot evaluate an empty split".into()));
    }
    if preds.len() != samples.len() {
        return Err(shape_err!("{} predictions for {} samples", preds.len(), samples.len()));
    }
    let pred_counts: Vec<f64> = preds.iter().map(count_from_density).collect();
    let gt_counts: Vec<f64> = samples.iter().map(|s| s.count as f64).collect();
    let (mae, mse) = mae_mse(&pred_counts, &gt_counts)?;
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        psnr_sum += psnr(p, &s.density)?;
        ssim_sum += ssim(p, &s.density)?;
    }
    let n = samples.len() as f64;
    Ok(MetricsReport {
        mae,
        mse,
        psnr: psnr_sum / n,
        ssim: ssim_sum / n,
        n_images: samples.len(),
    })
}

/// Images per forward call during evaluation.
const EVAL_BATCH: usize = 16;

/// Density predictions of `net` with `params` for every sample, in order.
pub fn predict(net: &CounterNet, params: &Params, samples: &[Sample]) -> Result<Vec<Tensor>> {
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        let out = net.forward(params, &Tensor::stack_batch(&images)?)?;
        for i in 0..chunk.len() {
            preds.push(out.batch_item(i)?);
        }
    }
    Ok(preds)
}

/// Predicted and ground-truth counts without the map-quality metrics.
pub fn count_errors(net: &CounterNet, params: &Params, samples: &[Sample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(NltError::InvalidArgument("cannot evaluate an empty split".into()));
    }
    let preds = predict(net, params, samples)?;
    let pred_counts: Vec<f64> = preds.iter().map(count_from_density).collect();
    let gt_counts: Vec<f64> = samples.iter().map(|s| s.count as f64).collect();
    mae_mse(&pred_counts, &gt_counts)
}

pub fn evaluate(net: &CounterNet, params: &Params, samples: &[Sample]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(NltError::InvalidArgument("cannot evaluate an empty split".into()));
    }
    let preds = predict(net, params, samples)?;
    evaluate_predictions(&preds, samples)
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mae={}", self.mae)?;
        writeln!(f, "mse={}", self.mse)?;
        writeln!(f, "psnr={}", self.psnr)?;
        writeln!(f, "ssim={}", self.ssim)?;
        writeln!(f, "n_images={}", self.n_images)
    }
}

impl FromStr for MetricsReport {
    type Err = NltError;

    fn from_str(s: &str) -> Result<Self> {
        let mut r = MetricsReport {
            mae: f64::NAN,
            mse: f64::NAN,
            psnr: f64::NAN,
            ssim: f64::NAN,
            n_images: 0,
        };
        let mut seen = 0u8;
        for line in s.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| NltError::InvalidArgument(format!("bad report line {line:?}")))?;
            let num = || {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| NltError::InvalidArgument(format!("bad value in {line:?}")))
            };
            match k.trim() {
                "mae" => (r.mae, seen) = (num()?, seen | 1),
                "mse" => (r.mse, seen) = (num()?, seen | 2),
                "psnr" => (r.psnr, seen) = (num()?, seen | 4),
                "ssim" => (r.ssim, seen) = (num()?, seen | 8),
                "n_images" => {
                    r.n_images = v.trim().parse().map_err(|_| {
                        NltError::InvalidArgument(format!("bad value in {line:?}"))
                    })?;
                    seen |= 16;
                }
                other => {
                    return Err(NltError::InvalidArgument(format!("unknown metric {other:?}")))
                }
            }
        }
        if seen != 31 {
            return Err(NltError::InvalidArgument("incomplete metrics report".into()));
        }
        Ok(r)
    }
}
