//! Subcommand bodies. Each writes into a staging directory that is moved
//! into place only when the command succeeds.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use nlt_core::analysis::{
    classify_shift, kernel_mean_histogram, layer_shift_means, render_histogram_pgm, LayerShiftStats,
};
use nlt_core::checkpoint::write_atomic;
use nlt_core::data::{read_samples, write_samples, DatasetSplit};
use nlt_core::experiment::{run_study, ExperimentData, StudyJob, StudyResult};
use nlt_core::train::LogRow;
use nlt_core::{Checkpoint, Regime};

use crate::config::{RunConfig, RESOLVED_CONFIG_FILE};
use crate::tables::{
    compare_text, compare_tsv, split_hash, sweep_text, sweep_tsv, CompareRow, SweepRow,
};

const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Output directory under construction.
pub struct Staging {
    target: PathBuf,
    tmp: PathBuf,
    committed: bool,
}

impl Staging {
    pub fn new(target: &Path) -> Result<Staging> {
        let name = target
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".into());
        let parent = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        let tmp = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        Ok(Staging {
            target: target.to_path_buf(),
            tmp,
            committed: false,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.tmp.join(rel)
    }

    pub fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        write_atomic(&p, contents.as_ref())?;
        Ok(())
    }

    /// Moves every staged entry into the target directory, replacing
    /// same-named entries.
    pub fn commit(mut self) -> Result<PathBuf> {
        fs::create_dir_all(&self.target)
            .with_context(|| format!("creating {}", self.target.display()))?;
        let mut entries: Vec<_> = fs::read_dir(&self.tmp)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let dest = self.target.join(e.file_name());
            if dest.is_dir() {
                fs::remove_dir_all(&dest)?;
            }
            fs::rename(e.path(), &dest).with_context(|| format!("moving output to {}", dest.display()))?;
        }
        fs::remove_dir(&self.tmp)?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

fn echo_config(stage: &Staging, cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut resolved = cfg.clone();
    resolved.out_dir = Some(out.to_path_buf());
    stage.write(RESOLVED_CONFIG_FILE, resolved.to_toml()?)
}

fn read_split(dir: &Path, size: (usize, usize)) -> Result<DatasetSplit> {
    let r = |s: &str| read_samples(&dir.join(s), size).with_context(|| format!("reading {}/{s}", dir.display()));
    Ok(DatasetSplit {
        train: r("train")?,
        val: r("val")?,
        test: r("test")?,
    })
}

/// Experiment data from `data_dir` when set, otherwise generated inline.
pub fn load_data(cfg: &RunConfig) -> Result<ExperimentData> {
    let source = cfg.source.to_spec()?;
    let target = cfg.target.to_spec()?;
    let data = match &cfg.data_dir {
        Some(dir) => ExperimentData::from_splits(
            read_split(&dir.join("source"), source.image_size)?,
            read_split(&dir.join("target"), target.image_size)?,
            cfg.scene_regularization,
            target.count_range,
        )?,
        None => ExperimentData::build(
            &source,
            &target,
            cfg.sizes.to_sizes(),
            cfg.scene_regularization,
            cfg.seed,
        )?,
    };
    if data.target_val.is_empty() || data.target_test.is_empty() {
        bail!("target val and test splits must be non-empty");
    }
    Ok(data)
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<String> {
    let source = cfg.source.to_spec()?;
    let target = cfg.target.to_spec()?;
    let (src, tgt) = ExperimentData::generate_splits(&source, &target, cfg.sizes.to_sizes(), cfg.seed)?;
    let stage = Staging::new(out)?;
    let mut manifest = String::from("split\tcount\tsha256\n");
    for (domain, split) in [("source", &src), ("target", &tgt)] {
        for (name, samples) in SPLITS.iter().zip([&split.train, &split.val, &split.test]) {
            let rel = format!("{domain}/{name}");
            write_samples(&stage.path(&rel), samples)?;
            manifest.push_str(&format!("{rel}\t{}\t{}\n", samples.len(), split_hash(samples)));
        }
    }
    stage.write("dataset.tsv", &manifest)?;
    echo_config(&stage, cfg, out)?;
    stage.commit()?;
    Ok(manifest)
}

fn log_text(log: &[LogRow]) -> String {
    let mut s = format!("{}\n", LogRow::HEADER);
    for r in log {
        s.push_str(&format!("{r}\n"));
    }
    s
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<String> {
    let data = load_data(cfg)?;
    let job = StudyJob {
        regime: cfg.regime()?,
        ratio: cfg.few_shot_ratio,
    };
    let mut results = run_study(cfg.net_config()?, &data, &cfg.train_config()?, &[job])?;
    let r = results.remove(0);
    let stage = Staging::new(out)?;
    r.outcome.checkpoint.save(&stage.path("best.ckpt"))?;
    stage.write("train.log", log_text(&r.outcome.log))?;
    let report = format!(
        "regime={}\nbest_iteration={}\nsplit=target_test\n{}",
        job.regime, r.outcome.checkpoint.iteration, r.test
    );
    stage.write("report.txt", &report)?;
    echo_config(&stage, cfg, out)?;
    stage.commit()?;
    Ok(report)
}

fn write_outcomes(stage: &Staging, results: &[StudyResult], suffix: impl Fn(&StudyResult) -> String) -> Result<()> {
    for r in results {
        let name = suffix(r);
        r.outcome.checkpoint.save(&{
            let p = stage.path(&format!("checkpoints/{name}.ckpt"));
            fs::create_dir_all(p.parent().expect("has parent"))?;
            p
        })?;
        stage.write(&format!("logs/{name}.log"), log_text(&r.outcome.log))?;
    }
    Ok(())
}

pub fn cmd_compare(cfg: &RunConfig, out: &Path) -> Result<String> {
    let regimes = cfg.compare_regimes()?;
    let data = load_data(cfg)?;
    let jobs: Vec<StudyJob> = regimes
        .iter()
        .map(|&regime| StudyJob {
            regime,
            ratio: cfg.few_shot_ratio,
        })
        .collect();
    let results = run_study(cfg.net_config()?, &data, &cfg.train_config()?, &jobs)?;
    let rows: Vec<CompareRow> = results
        .iter()
        .map(|r| CompareRow {
            regime: r.job.regime,
            mae: r.test.mae,
            mse: r.test.mse,
            psnr: r.test.psnr,
            ssim: r.test.ssim,
        })
        .collect();
    let hash = split_hash(&data.target_test);
    let stage = Staging::new(out)?;
    stage.write("compare.tsv", compare_tsv(&rows, &hash))?;
    let text = compare_text(&rows, &hash);
    stage.write("compare.txt", &text)?;
    write_outcomes(&stage, &results, |r| r.job.regime.to_string())?;
    echo_config(&stage, cfg, out)?;
    stage.commit()?;
    Ok(text)
}

pub fn cmd_sweep(cfg: &RunConfig, out: &Path) -> Result<String> {
    let ratios = cfg.sweep_ratios()?;
    let data = load_data(cfg)?;
    let jobs: Vec<StudyJob> = ratios
        .iter()
        .flat_map(|&ratio| {
            [Regime::Nlt, Regime::Supervised]
                .into_iter()
                .map(move |regime| StudyJob { regime, ratio })
        })
        .collect();
    let results = run_study(cfg.net_config()?, &data, &cfg.train_config()?, &jobs)?;
    let rows: Vec<SweepRow> = results
        .iter()
        .map(|r| SweepRow {
            ratio: r.job.ratio,
            regime: r.job.regime,
            mae: r.test.mae,
            mse: r.test.mse,
        })
        .collect();
    let stage = Staging::new(out)?;
    stage.write("sweep.tsv", sweep_tsv(&rows))?;
    let text = sweep_text(&rows);
    stage.write("sweep.txt", &text)?;
    write_outcomes(&stage, &results, |r| format!("{}_{}", r.job.regime, r.job.ratio))?;
    echo_config(&stage, cfg, out)?;
    stage.commit()?;
    Ok(text)
}

fn stats_text(stats: &[LayerShiftStats]) -> String {
    let mut s = format!("{}\n", LayerShiftStats::HEADER);
    for r in stats {
        s.push_str(&format!("{r}\n"));
    }
    s
}

pub fn cmd_stats(cfg: &RunConfig, out: &Path) -> Result<String> {
    let path = cfg
        .stats
        .checkpoint
        .as_ref()
        .context("stats needs a checkpoint (stats.checkpoint or --checkpoint)")?;
    let ckpt = Checkpoint::load(path)?;
    let Some(bank) = &ckpt.bank else {
        bail!("regime has no shift parameters: checkpoint {} was trained with {}", path.display(), ckpt.regime);
    };
    let stats = layer_shift_means(bank);
    let category = classify_shift(&stats, cfg.stats.threshold)?;
    let target = ckpt.target_params()?;
    let layers: Vec<usize> = if cfg.stats.layers.is_empty() {
        (0..target.layers.len()).collect()
    } else {
        cfg.stats.layers.clone()
    };
    let stage = Staging::new(out)?;
    stage.write("shift_means.tsv", stats_text(&stats))?;
    let summary = format!(
        "category={category}\nthreshold_ratio={}\nregime={}\nlayers={}\n",
        cfg.stats.threshold,
        ckpt.regime,
        stats.len()
    );
    stage.write("category.txt", &summary)?;
    for &i in &layers {
        let layer = target
            .layers
            .get(i)
            .with_context(|| format!("layer {i} out of range ({} conv layers)", target.layers.len()))?;
        let [lo, hi] = cfg.stats.range;
        let h = kernel_mean_histogram(layer, cfg.stats.bins, (lo, hi))?;
        stage.write(&format!("hist_layer{i}.tsv"), format!("lo\thi\tcount\n{h}"))?;
        if cfg.stats.plot {
            stage.write(&format!("hist_layer{i}.pgm"), render_histogram_pgm(&h, 200, 100))?;
        }
    }
    echo_config(&stage, cfg, out)?;
    stage.commit()?;
    Ok(summary)
}
