//! Run configuration: TOML with section headers, unknown keys rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use nlt_core::analysis::DEFAULT_MAJORITY;
use nlt_core::data::{Background, DomainSpec};
use nlt_core::experiment::ExperimentSizes;
use nlt_core::{NetConfig, Regime, TrainConfig};

/// Overrides the default output root (`runs`) when neither `--out` nor
/// `out_dir` is given.
pub const OUT_ROOT_ENV: &str = "NLT_OUT_ROOT";

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for data generation, initialization and batch sampling.
    pub seed: u64,
    pub net: String,
    pub out_dir: Option<PathBuf>,
    /// Directory written by `nlt generate`; scenes are generated inline when absent.
    pub data_dir: Option<PathBuf>,
    pub regime: String,
    pub few_shot_ratio: f64,
    pub scene_regularization: bool,
    /// Regimes for `compare`.
    pub regimes: Vec<String>,
    /// Few-shot ratios for `sweep`.
    pub ratios: Vec<f64>,
    pub source: DomainSection,
    pub target: DomainSection,
    pub sizes: SizesSection,
    pub train: TrainSection,
    pub stats: StatsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            net: NetConfig::DeskSmall.name().into(),
            out_dir: None,
            data_dir: None,
            regime: Regime::Nlt.name().into(),
            few_shot_ratio: 0.1,
            scene_regularization: true,
            regimes: vec![
                Regime::NoAdapt.name().into(),
                Regime::FinetuneAll.name().into(),
                Regime::Nlt.name().into(),
            ],
            ratios: vec![0.05, 0.1, 0.3, 0.5],
            source: DomainSection::from(DomainSpec::default_source()),
            target: DomainSection::from(DomainSpec::default_target()),
            sizes: SizesSection::default(),
            train: TrainSection::default(),
            stats: StatsSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    pub name: String,
    pub count_range: [usize; 2],
    pub blob_sigma_px: f64,
    pub background: String,
    pub brightness: f64,
    pub noise_std: f64,
    pub image_size: [usize; 2],
}

impl From<DomainSpec> for DomainSection {
    fn from(s: DomainSpec) -> Self {
        DomainSection {
            name: s.name,
            count_range: [s.count_range.0, s.count_range.1],
            blob_sigma_px: s.blob_sigma_px,
            background: s.background.name().into(),
            brightness: s.brightness,
            noise_std: s.noise_std,
            image_size: [s.image_size.0, s.image_size.1],
        }
    }
}

impl DomainSection {
    pub fn to_spec(&self) -> Result<DomainSpec> {
        let spec = DomainSpec {
            name: self.name.clone(),
            count_range: (self.count_range[0], self.count_range[1]),
            blob_sigma_px: self.blob_sigma_px,
            background: self.background.parse::<Background>()?,
            brightness: self.brightness,
            noise_std: self.noise_std,
            image_size: (self.image_size[0], self.image_size[1]),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SizesSection {
    pub source_train: usize,
    pub source_val: usize,
    pub source_test: usize,
    pub target_train: usize,
    pub target_val: usize,
    pub target_test: usize,
}

impl Default for SizesSection {
    fn default() -> Self {
        let s = ExperimentSizes::default();
        SizesSection {
            source_train: s.source_train,
            source_val: s.source_val,
            source_test: s.source_test,
            target_train: s.target_train,
            target_val: s.target_val,
            target_test: s.target_test,
        }
    }
}

impl SizesSection {
    pub fn to_sizes(&self) -> ExperimentSizes {
        ExperimentSizes {
            source_train: self.source_train,
            source_val: self.source_val,
            source_test: self.source_test,
            target_train: self.target_train,
            target_val: self.target_val,
            target_test: self.target_test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub source_batch: usize,
    pub target_batch: usize,
    pub iterations: usize,
    pub val_interval: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::desk();
        TrainSection {
            alpha: d.alpha,
            beta: d.beta,
            lambda: d.lambda,
            source_batch: d.source_batch,
            target_batch: d.target_batch,
            iterations: d.iterations,
            val_interval: d.val_interval,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsSection {
    pub checkpoint: Option<PathBuf>,
    /// Conv layers to histogram; empty means all.
    pub layers: Vec<usize>,
    pub bins: usize,
    pub range: [f64; 2],
    pub threshold: f64,
    pub plot: bool,
}

impl Default for StatsSection {
    fn default() -> Self {
        StatsSection {
            checkpoint: None,
            layers: Vec::new(),
            bins: 20,
            range: [-0.5, 0.5],
            threshold: DEFAULT_MAJORITY,
            plot: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn net_config(&self) -> Result<NetConfig> {
        Ok(self.net.parse()?)
    }

    pub fn regime(&self) -> Result<Regime> {
        Ok(self.regime.parse()?)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            alpha: t.alpha,
            beta: t.beta,
            lambda: t.lambda,
            source_batch: t.source_batch,
            target_batch: t.target_batch,
            iterations: t.iterations,
            val_interval: t.val_interval,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn compare_regimes(&self) -> Result<Vec<Regime>> {
        let regimes = self
            .regimes
            .iter()
            .map(|r| r.parse::<Regime>().map_err(anyhow::Error::from))
            .collect::<Result<Vec<_>>>()?;
        if regimes.len() < 2 {
            bail!("compare needs at least two regimes, got {}", regimes.len());
        }
        for (i, r) in regimes.iter().enumerate() {
            if regimes[..i].contains(r) {
                bail!("regime {r} is listed more than once");
            }
        }
        Ok(regimes)
    }

    pub fn sweep_ratios(&self) -> Result<Vec<f64>> {
        if self.ratios.is_empty() {
            bail!("sweep needs at least one ratio");
        }
        for &r in &self.ratios {
            if !(r > 0.0 && r <= 1.0) {
                bail!("few-shot ratio must lie in (0, 1], got {r}");
            }
        }
        Ok(self.ratios.clone())
    }

    /// Checks everything that can be checked without running: value ranges,
    /// names, and that referenced paths exist.
    pub fn validate(&self) -> Result<()> {
        self.net_config()?;
        self.regime()?;
        self.train_config()?;
        let s = self.source.to_spec().context("[source]")?;
        let t = self.target.to_spec().context("[target]")?;
        if s.image_size != t.image_size {
            bail!("source and target image_size differ");
        }
        if !(self.few_shot_ratio > 0.0 && self.few_shot_ratio <= 1.0) {
            bail!("few_shot_ratio must lie in (0, 1], got {}", self.few_shot_ratio);
        }
        if let Some(d) = &self.data_dir {
            if !d.is_dir() {
                bail!("data_dir {} does not exist", d.display());
            }
        }
        if let Some(c) = &self.stats.checkpoint {
            if !c.is_file() {
                bail!("stats.checkpoint {} does not exist", c.display());
            }
        }
        let [lo, hi] = self.stats.range;
        if self.stats.bins == 0 || !(lo < hi) {
            bail!("stats needs bins >= 1 and range lo < hi");
        }
        Ok(())
    }

    /// Output directory: explicit flag, then `out_dir`, then
    /// `$NLT_OUT_ROOT/<command>`, then `runs/<command>`.
    pub fn resolve_out(&self, flag: Option<&Path>, command: &str) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(p) = &self.out_dir {
            return p.clone();
        }
        let root = std::env::var_os(OUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(command)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 3\n").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nalpah = 1.0\n").is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c: RunConfig = toml::from_str("seed = 9\n[train]\niterations = 5\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.iterations, 5);
        assert_eq!(c.train.val_interval, TrainConfig::desk().val_interval);
        c.validate().unwrap();
    }

    #[test]
    fn inverted_count_range_fails_validation() {
        let mut c = RunConfig::default();
        c.source.count_range = [30, 10];
        assert!(c.validate().is_err());
    }

    #[test]
    fn compare_list_checks() {
        let mut c = RunConfig::default();
        c.regimes = vec!["nlt".into(), "nlt".into()];
        assert!(c.compare_regimes().is_err());
        c.regimes = vec!["nlt".into()];
        assert!(c.compare_regimes().is_err());
        c.regimes = vec!["nlt".into(), "no_adapt".into()];
        assert_eq!(c.compare_regimes().unwrap(), [Regime::Nlt, Regime::NoAdapt]);
    }

    #[test]
    fn missing_paths_rejected() {
        let mut c = RunConfig::default();
        c.data_dir = Some("/definitely/not/here".into());
        assert!(c.validate().is_err());
    }
}
