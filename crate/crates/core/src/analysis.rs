//! Parameter-level statistics of source kernels and learned shift banks.

use std::fmt;
use std::str::FromStr;

use crate::error::{NltError, Result};
use crate::net::ConvParams;
use crate::nlt::ShiftBank;

/// Default layer-majority threshold for [`classify_shift`].
pub const DEFAULT_MAJORITY: f64 = 0.7;

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `bins + 1` ascending edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

impl fmt::Display for Histogram {
    /// One `lo\thi\tcount` line per bin.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(f, "{}\t{}\t{}", self.edges[i], self.edges[i + 1], c)?;
        }
        Ok(())
    }
}

/// Mean of each neuron's `c * kh * kw` weights.
pub fn kernel_means(layer: &ConvParams) -> Vec<f64> {
    let o = layer.weight.shape()[0];
    let per = layer.weight.numel() / o.max(1);
    layer
        .weight
        .data()
        .chunks_exact(per.max(1))
        .map(|k| k.iter().map(|&v| v as f64).sum::<f64>() / per as f64)
        .collect()
}

/// Histogram of per-neuron kernel means. Means outside `range` land in the
/// edge bins.
pub fn kernel_mean_histogram(layer: &ConvParams, bins: usize, range: (f64, f64)) -> Result<Histogram> {
    let (lo, hi) = range;
    if bins == 0 {
        return Err(NltError::InvalidArgument("histogram needs at least one bin".into()));
    }
    if !(lo < hi) {
        return Err(NltError::InvalidArgument(format!(
            "histogram range must satisfy lo < hi, got [{lo}, {hi}]"
        )));
    }
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0; bins];
    for m in kernel_means(layer) {
        let b = ((m - lo) / width).floor();
        let b = if b.is_nan() { 0 } else { b.clamp(0.0, (bins - 1) as f64) as usize };
        counts[b] += 1;
    }
    Ok(Histogram { edges, counts })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerShiftStats {
    pub layer_index: usize,
    pub mean_factor_minus_one: f64,
    pub mean_bias: f64,
    /// Scalars per component (`in_channels * out_channels`).
    pub n_scalars: usize,
}

impl LayerShiftStats {
    pub const HEADER: &'static str = "layer\tmean_factor_minus_one\tmean_bias\tn_scalars";
}

impl fmt::Display for LayerShiftStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}",
            self.layer_index, self.mean_factor_minus_one, self.mean_bias, self.n_scalars
        )
    }
}

pub fn layer_shift_means(bank: &ShiftBank) -> Vec<LayerShiftStats> {
    bank.layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let n = l.factor.len();
            let mean = |v: &[f32], off: f64| {
                if n == 0 {
                    0.0
                } else {
                    v.iter().map(|&x| x as f64 - off).sum::<f64>() / n as f64
                }
            };
            LayerShiftStats {
                layer_index: i,
                mean_factor_minus_one: mean(&l.factor, 1.0),
                mean_bias: mean(&l.bias, 0.0),
                n_scalars: n,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShiftCategory {
    Down,
    Up,
    UpDown,
}

impl ShiftCategory {
    pub fn name(self) -> &'static str {
        match self {
            ShiftCategory::Down => "down",
            ShiftCategory::Up => "up",
            ShiftCategory::UpDown => "up_down",
        }
    }
}

impl fmt::Display for ShiftCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShiftCategory {
    type Err = NltError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "down" => Ok(ShiftCategory::Down),
            "up" => Ok(ShiftCategory::Up),
            "up_down" => Ok(ShiftCategory::UpDown),
            _ => Err(NltError::InvalidArgument(format!("unknown shift category {s:?}"))),
        }
    }
}

/// `down` when at least `threshold_ratio` of the layers have both means
/// negative, `up` when at least that share has both positive, else `up_down`.
pub fn classify_shift(stats: &[LayerShiftStats], threshold_ratio: f64) -> Result<ShiftCategory> {
    if stats.is_empty() {
        return Err(NltError::InvalidArgument("classify_shift needs at least one layer".into()));
    }
    if !(threshold_ratio > 0.0 && threshold_ratio <= 1.0) {
        return Err(NltError::InvalidArgument(format!(
            "threshold ratio must lie in (0, 1], got {threshold_ratio}"
        )));
    }
    let need = threshold_ratio * stats.len() as f64;
    let down = stats
        .iter()
        .filter(|s| s.mean_factor_minus_one < 0.0 && s.mean_bias < 0.0)
        .count();
    let up = stats
        .iter()
        .filter(|s| s.mean_factor_minus_one > 0.0 && s.mean_bias > 0.0)
        .count();
    Ok(if down as f64 >= need {
        ShiftCategory::Down
    } else if up as f64 >= need {
        ShiftCategory::Up
    } else {
        ShiftCategory::UpDown
    })
}

fn shift_vector(bank: &ShiftBank) -> Vec<f64> {
    let mut v = Vec::with_capacity(2 * bank.scalars_per_component());
    for l in &bank.layers {
        v.extend(l.factor.iter().map(|&f| f as f64 - 1.0));
    }
    for l in &bank.layers {
        v.extend(l.bias.iter().map(|&b| b as f64));
    }
    v
}

/// Pairwise cosine similarity of the `(factor - 1, bias)` vectors. Two
/// all-zero banks count as identical; a zero bank against a non-zero one
/// scores 0.
pub fn shift_stability_report(banks: &[ShiftBank]) -> Result<Vec<Vec<f64>>> {
    if let Some(first) = banks.first() {
        if let Some(i) = banks.iter().position(|b| !b.same_structure(first)) {
            return Err(NltError::Structure(format!(
                "shift bank {i} does not match the structure of bank 0"
            )));
        }
    }
    let vecs: Vec<Vec<f64>> = banks.iter().map(shift_vector).collect();
    let norms: Vec<f64> = vecs.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let n = banks.len();
    let mut m = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = match (norms[i] > 0.0, norms[j] > 0.0) {
                (true, true) => {
                    let dot: f64 = vecs[i].iter().zip(&vecs[j]).map(|(a, b)| a * b).sum();
                    (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
                }
                (false, false) => 1.0,
                _ => 0.0,
            };
            m[i][j] = s;
            m[j][i] = s;
        }
    }
    Ok(m)
}

/// Bar chart of a histogram as a binary PGM (white bars on black).
pub fn render_histogram_pgm(hist: &Histogram, width: usize, height: usize) -> Vec<u8> {
    let (width, height) = (width.max(1), height.max(1));
    let mut px = vec![0u8; width * height];
    let max = hist.counts.iter().copied().max().unwrap_or(0).max(1);
    let bins = hist.counts.len().max(1);
    for x in 0..width {
        let b = (x * bins / width).min(bins - 1);
        let c = hist.counts.get(b).copied().unwrap_or(0);
        let bar = c * height / max;
        for y in height - bar..height {
            px[y * width + x] = 255;
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(px);
    out
}
