//! On-disk checkpoints: a `key=value` text manifest ended by a blank line,
//! followed by the raw little-endian `f32` blobs in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{NltError, Result};
use crate::net::{CounterNet, ConvParams, Params};
use crate::nlt::{apply_nlt, LayerShift, ShiftBank};
use crate::tensor::Tensor;
use crate::train::Regime;

const FORMAT: &str = "nlt-checkpoint-v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// [`CounterNet::arch_string`] of the network the parameters belong to.
    pub arch: String,
    pub regime: Regime,
    /// Iteration at which the checkpoint was selected.
    pub iteration: usize,
    pub seed: u64,
    pub metrics: Vec<(String, f64)>,
    /// Source parameters (or the directly trained parameters for regimes
    /// without a shift bank).
    pub source: Params,
    pub bank: Option<ShiftBank>,
}

impl Checkpoint {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| k == name).map(|&(_, v)| v)
    }

    /// Parameters used on the target domain.
    pub fn target_params(&self) -> Result<Params> {
        match &self.bank {
            Some(bank) => apply_nlt(&self.source, bank),
            None => Ok(self.source.clone()),
        }
    }

    /// Network structure with the target parameters loaded.
    pub fn target_net(&self) -> Result<CounterNet> {
        let mut net = CounterNet::from_arch_string(&self.arch)?;
        let params = self.target_params()?;
        net.check_params(&params)?;
        net.params = params;
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = String::new();
        let mut blobs: Vec<&[f32]> = Vec::new();
        let mut line = |k: &str, v: &str| {
            head.push_str(k);
            head.push('=');
            head.push_str(v);
            head.push('\n');
        };
        line("format", FORMAT);
        line("arch", &self.arch);
        line("regime", self.regime.name());
        line("iteration", &self.iteration.to_string());
        line("seed", &self.seed.to_string());
        for (k, v) in &self.metrics {
            line(&format!("metric.{k}"), &v.to_string());
        }
        for (i, l) in self.source.layers.iter().enumerate() {
            line(&format!("blob.source.{i}.weight"), &dims(l.weight.shape()));
            line(&format!("blob.source.{i}.bias"), &dims(l.bias.shape()));
            blobs.push(l.weight.data());
            blobs.push(l.bias.data());
        }
        if let Some(bank) = &self.bank {
            for (i, l) in bank.layers.iter().enumerate() {
                let shape = [l.out_channels, l.in_channels];
                line(&format!("blob.bank.{i}.factor"), &dims(&shape));
                line(&format!("blob.bank.{i}.bias"), &dims(&shape));
                blobs.push(&l.factor);
                blobs.push(&l.bias);
            }
        }
        head.push('\n');
        let mut out = head.into_bytes();
        for b in blobs {
            for v in b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |m: String| NltError::Checkpoint(m);
        let end = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| bad("manifest is not terminated by a blank line".into()))?;
        let head = std::str::from_utf8(&bytes[..end])
            .map_err(|_| bad("manifest is not valid UTF-8".into()))?;
        let payload = &bytes[end + 2..];

        let mut arch = None;
        let mut regime = None;
        let mut iteration = None;
        let mut seed = None;
        let mut metrics = Vec::new();
        let mut blobs: Vec<(String, Vec<usize>)> = Vec::new();
        let mut format_ok = false;
        for l in head.lines() {
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| bad(format!("manifest line without '=': {l:?}")))?;
            let num = |v: &str| -> Result<u64> {
                v.parse().map_err(|_| bad(format!("bad value for {k}: {v:?}")))
            };
            match k {
                "format" if v == FORMAT => format_ok = true,
                "format" => return Err(bad(format!("unsupported format {v:?}"))),
                "arch" => arch = Some(v.to_string()),
                "regime" => regime = Some(v.parse::<Regime>()?),
                "iteration" => iteration = Some(num(v)? as usize),
                "seed" => seed = Some(num(v)?),
                _ if k.starts_with("metric.") => {
                    let x: f64 = v.parse().map_err(|_| bad(format!("bad metric value {v:?}")))?;
                    metrics.push((k["metric.".len()..].to_string(), x));
                }
                _ if k.starts_with("blob.") => {
                    let shape = v
                        .split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad(format!("bad blob shape {v:?}")))?;
                    blobs.push((k.to_string(), shape));
                }
                _ => return Err(bad(format!("unknown manifest key {k:?}"))),
            }
        }
        if !format_ok {
            return Err(bad("manifest has no format line".into()));
        }
        let missing = |k: &str| bad(format!("manifest is missing {k}"));
        let arch = arch.ok_or_else(|| missing("arch"))?;

        let expected: usize = blobs
            .iter()
            .map(|(_, s)| s.iter().product::<usize>() * 4)
            .sum();
        if expected != payload.len() {
            return Err(bad(format!(
                "payload length mismatch: expected {expected} bytes, found {}",
                payload.len()
            )));
        }
        let mut offset = 0;
        let mut take = |n: usize| -> Vec<f32> {
            let v = payload[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            offset += 4 * n;
            v
        };

        let mut source = Params { layers: Vec::new() };
        let mut bank_layers = Vec::new();
        let mut it = blobs.iter();
        while let Some((k, shape)) = it.next() {
            let parts: Vec<&str> = k.split('.').collect();
            let (Some(&group), Some(&idx), Some(&first)) = (parts.get(1), parts.get(2), parts.get(3))
            else {
                return Err(bad(format!("bad blob key {k:?}")));
            };
            let (k2, shape2) = it
                .next()
                .ok_or_else(|| bad(format!("blob {k:?} has no partner")))?;
            let layer = idx
                .parse::<usize>()
                .map_err(|_| bad(format!("bad blob key {k:?}")))?;
            match (group, first) {
                ("source", "weight")
                    if *k2 == format!("blob.source.{idx}.bias") && layer == source.layers.len() =>
                {
                    let w = take(shape.iter().product());
                    let b = take(shape2.iter().product());
                    source.layers.push(ConvParams {
                        weight: Tensor::new(shape, w)?,
                        bias: Tensor::new(shape2, b)?,
                    });
                }
                ("bank", "factor")
                    if *k2 == format!("blob.bank.{idx}.bias")
                        && layer == bank_layers.len()
                        && shape.len() == 2
                        && shape == shape2 =>
                {
                    let factor = take(shape.iter().product());
                    let bias = take(shape2.iter().product());
                    bank_layers.push(LayerShift {
                        in_channels: shape[1],
                        out_channels: shape[0],
                        factor,
                        bias,
                    });
                }
                _ => return Err(bad(format!("unexpected blob sequence at {k:?}"))),
            }
        }

        let ckpt = Checkpoint {
            arch,
            regime: regime.ok_or_else(|| missing("regime"))?,
            iteration: iteration.ok_or_else(|| missing("iteration"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            metrics,
            source,
            bank: (!bank_layers.is_empty()).then_some(ShiftBank { layers: bank_layers }),
        };
        let net = CounterNet::from_arch_string(&ckpt.arch)?;
        net.check_params(&ckpt.source)?;
        if let Some(bank) = &ckpt.bank {
            apply_nlt(&ckpt.source, bank)?;
        }
        Ok(ckpt)
    }

    /// Writes to a temporary sibling and renames, so readers never see a
    /// partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| NltError::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Loads and checks that the checkpoint belongs to `net`'s architecture.
    pub fn load_for(path: &Path, net: &CounterNet) -> Result<Checkpoint> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.arch != net.arch_string() {
            return Err(NltError::Structure(format!(
                "checkpoint architecture {:?} does not match network {:?}",
                ckpt.arch,
                net.arch_string()
            )));
        }
        Ok(ckpt)
    }
}

fn dims(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

/// Write-then-rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| NltError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| NltError::io(&tmp, e))?;
    f.sync_all().map_err(|e| NltError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| NltError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_counter, NetConfig};
    use crate::nlt::init_shift_bank;

    fn sample_ckpt() -> Checkpoint {
        let net = build_counter(NetConfig::DeskSmall, 4);
        let mut bank = init_shift_bank(&net);
        bank.layers[1].factor[3] = 0.75;
        bank.layers[9].bias[0] = -0.1;
        Checkpoint {
            arch: net.arch_string(),
            regime: Regime::Nlt,
            iteration: 150,
            seed: 4,
            metrics: vec![("val_mae".into(), 1.0 / 3.0)],
            source: net.params.clone(),
            bank: Some(bank),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample_ckpt();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert!(back.source.bitwise_eq(&c.source));
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn round_trip_without_bank() {
        let mut c = sample_ckpt();
        c.bank = None;
        c.regime = Regime::FinetuneAll;
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn truncated_payload_reports_lengths() {
        let bytes = sample_ckpt().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected") && msg.contains("found"), "{msg}");
    }

    #[test]
    fn architecture_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        sample_ckpt().save(&path).unwrap();
        let other = build_counter(NetConfig::PaperVgg16, 0);
        assert!(matches!(
            Checkpoint::load_for(&path, &other),
            Err(NltError::Structure(_))
        ));
        let same = build_counter(NetConfig::DeskSmall, 9);
        assert!(Checkpoint::load_for(&path, &same).is_ok());
    }

    #[test]
    fn target_params_apply_bank() {
        let c = sample_ckpt();
        let t = c.target_params().unwrap();
        let w = c.source.layers[1].weight.data()[3 * 9];
        assert_eq!(t.layers[1].weight.data()[3 * 9], 0.75 * w);
    }
}
