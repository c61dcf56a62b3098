//! Tab-separated result tables and their aligned text rendering.

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

use nlt_core::data::Sample;
use nlt_core::Regime;

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub regime: Regime,
    pub mae: f64,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub ratio: f64,
    pub regime: Regime,
    pub mae: f64,
    pub mse: f64,
}

pub const COMPARE_HEADER: [&str; 5] = ["regime", "mae", "mse", "psnr", "ssim"];
pub const SWEEP_HEADER: [&str; 4] = ["ratio", "regime", "mae", "mse"];

pub fn compare_tsv(rows: &[CompareRow], test_hash: &str) -> String {
    let mut out = format!("# test_split_sha256={test_hash}\n{}\n", COMPARE_HEADER.join("\t"));
    for r in rows {
        out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", r.regime, r.mae, r.mse, r.psnr, r.ssim));
    }
    out
}

pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut out = format!("{}\n", SWEEP_HEADER.join("\t"));
    for r in rows {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", r.ratio, r.regime, r.mae, r.mse));
    }
    out
}

fn data_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty())
}

fn check_header(line: Option<&str>, want: &[&str]) -> Result<()> {
    let got: Vec<&str> = line.unwrap_or_default().split('\t').collect();
    if got != want {
        bail!("unexpected table header {got:?}, expected {want:?}");
    }
    Ok(())
}

fn num(field: &str) -> Result<f64> {
    field.parse().with_context(|| format!("bad number {field:?}"))
}

pub fn parse_sweep_tsv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = data_lines(text);
    check_header(lines.next(), &SWEEP_HEADER)?;
    lines
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let [ratio, regime, mae, mse] = f[..] else {
                bail!("sweep row needs 4 fields: {l:?}");
            };
            Ok(SweepRow {
                ratio: num(ratio)?,
                regime: regime.parse()?,
                mae: num(mae)?,
                mse: num(mse)?,
            })
        })
        .collect()
}

pub fn parse_compare_tsv(text: &str) -> Result<Vec<CompareRow>> {
    let mut lines = data_lines(text);
    check_header(lines.next(), &COMPARE_HEADER)?;
    lines
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let [regime, mae, mse, psnr, ssim] = f[..] else {
                bail!("compare row needs 5 fields: {l:?}");
            };
            Ok(CompareRow {
                regime: regime.parse()?,
                mae: num(mae)?,
                mse: num(mse)?,
                psnr: num(psnr)?,
                ssim: num(ssim)?,
            })
        })
        .collect()
}

/// Left-aligned columns padded to the widest cell.
pub fn aligned(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

pub fn compare_text(rows: &[CompareRow], test_hash: &str) -> String {
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.regime.to_string(),
                format!("{:.3}", r.mae),
                format!("{:.3}", r.mse),
                format!("{:.2}", r.psnr),
                format!("{:.4}", r.ssim),
            ]
        })
        .collect();
    format!("test split sha256: {test_hash}\n{}", aligned(&COMPARE_HEADER, &cells))
}

pub fn sweep_text(rows: &[SweepRow]) -> String {
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.ratio.to_string(),
                r.regime.to_string(),
                format!("{:.3}", r.mae),
                format!("{:.3}", r.mse),
            ]
        })
        .collect();
    aligned(&SWEEP_HEADER, &cells)
}

/// SHA-256 over every image and density value of a split, in order.
pub fn split_hash(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        for v in s.image.data().iter().chain(s.density.data()) {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_round_trip() {
        let rows = vec![
            SweepRow { ratio: 0.1, regime: Regime::Nlt, mae: 1.0 / 3.0, mse: 2.5 },
            SweepRow { ratio: 0.1, regime: Regime::Supervised, mae: 4.0, mse: 5.25 },
            SweepRow { ratio: 0.3, regime: Regime::Nlt, mae: 0.125, mse: 1e-9 },
        ];
        assert_eq!(parse_sweep_tsv(&sweep_tsv(&rows)).unwrap(), rows);
    }

    #[test]
    fn compare_round_trip() {
        let rows = vec![
            CompareRow { regime: Regime::NoAdapt, mae: 3.5, mse: 4.0, psnr: 30.1, ssim: 0.7 },
            CompareRow { regime: Regime::Nlt, mae: 2.5, mse: 3.0, psnr: 31.9, ssim: 0.8 },
        ];
        assert_eq!(parse_compare_tsv(&compare_tsv(&rows, "ab")).unwrap(), rows);
    }

    #[test]
    fn bad_header_rejected() {
        assert!(parse_sweep_tsv("ratio\tmae\n").is_err());
    }

    #[test]
    fn aligned_pads_columns() {
        let t = aligned(&["a", "bb"], &[vec!["xyz".into(), "1".into()]]);
        assert_eq!(t, "a    bb\nxyz  1\n");
    }
}
