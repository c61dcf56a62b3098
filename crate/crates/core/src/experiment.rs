//! Paired source/target datasets and multi-regime studies on them.

use std::collections::BTreeMap;

use crate::data::{build_split, scene_regularization, DatasetSplit, DomainSpec, Sample, SplitSizes};
use crate::error::{NltError, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::net::{CounterNet, NetConfig};
use crate::train::{run_regimes, select_few_shot, FewShot, Regime, RegimeOutcome, TrainConfig};

/// Offset between the source and target generator seeds, so the two
/// domains never share a scene seed.
pub const TARGET_SEED_OFFSET: u64 = 1 << 32;

/// Offset of the few-shot selection seed from the run seed.
pub const FEW_SHOT_SEED_OFFSET: u64 = 0x5eed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExperimentSizes {
    /// Source scenes generated before scene regularization.
    pub source_train: usize,
    /// Source validation/test scenes; only written by dataset dumps.
    pub source_val: usize,
    pub source_test: usize,
    pub target_train: usize,
    pub target_val: usize,
    pub target_test: usize,
}

impl Default for ExperimentSizes {
    fn default() -> Self {
        ExperimentSizes {
            source_train: 600,
            source_val: 50,
            source_test: 50,
            target_train: 200,
            target_val: 40,
            target_test: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentData {
    /// Source training scenes, already filtered to the target count range
    /// when scene regularization is on.
    pub source_train: Vec<Sample>,
    pub target_train: Vec<Sample>,
    pub target_val: Vec<Sample>,
    pub target_test: Vec<Sample>,
}

impl ExperimentData {
    /// Generates both domains' splits. Sample `i` of the source uses seed
    /// `seed + i`; the target uses `seed + TARGET_SEED_OFFSET + i`.
    pub fn generate_splits(
        source: &DomainSpec,
        target: &DomainSpec,
        sizes: ExperimentSizes,
        seed: u64,
    ) -> Result<(DatasetSplit, DatasetSplit)> {
        if source.image_size != target.image_size {
            return Err(NltError::InvalidArgument(format!(
                "source and target image sizes differ: {:?} vs {:?}",
                source.image_size, target.image_size
            )));
        }
        let src = build_split(
            source,
            SplitSizes {
                train: sizes.source_train,
                val: sizes.source_val,
                test: sizes.source_test,
            },
            seed,
        )?;
        let tgt = build_split(
            target,
            SplitSizes {
                train: sizes.target_train,
                val: sizes.target_val,
                test: sizes.target_test,
            },
            seed.wrapping_add(TARGET_SEED_OFFSET),
        )?;
        Ok((src, tgt))
    }

    /// Assembles experiment data from full splits. With `scene_reg`, source
    /// training scenes are filtered to `target_range`.
    pub fn from_splits(
        source: DatasetSplit,
        target: DatasetSplit,
        scene_reg: bool,
        target_range: (usize, usize),
    ) -> Result<ExperimentData> {
        let source_train = if scene_reg {
            scene_regularization(source.train, target_range)?
        } else {
            source.train
        };
        Ok(ExperimentData {
            source_train,
            target_train: target.train,
            target_val: target.val,
            target_test: target.test,
        })
    }

    pub fn build(
        source: &DomainSpec,
        target: &DomainSpec,
        sizes: ExperimentSizes,
        scene_reg: bool,
        seed: u64,
    ) -> Result<ExperimentData> {
        let sizes = ExperimentSizes {
            source_val: 0,
            source_test: 0,
            ..sizes
        };
        let (src, tgt) = Self::generate_splits(source, target, sizes, seed)?;
        Self::from_splits(src, tgt, scene_reg, target.count_range)
    }
}

/// One cell of a study.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StudyJob {
    pub regime: Regime,
    /// Few-shot share of the target training split.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyResult {
    pub job: StudyJob,
    pub outcome: RegimeOutcome,
    /// Evaluated on the target test split with the selected checkpoint.
    pub test: MetricsReport,
}

/// Runs every job with shared data and seeds. Few-shot subsets are drawn
/// once per distinct ratio; the source stream is shared across jobs.
pub fn run_study(
    net_config: NetConfig,
    data: &ExperimentData,
    cfg: &TrainConfig,
    jobs: &[StudyJob],
) -> Result<Vec<StudyResult>> {
    let mut subsets: BTreeMap<u64, FewShot> = BTreeMap::new();
    for j in jobs {
        if let std::collections::btree_map::Entry::Vacant(e) = subsets.entry(j.ratio.to_bits()) {
            let s = select_few_shot(&data.target_train, j.ratio, cfg.seed.wrapping_add(FEW_SHOT_SEED_OFFSET))?;
            e.insert(FewShot::new(s));
        }
    }
    let pairs: Vec<(Regime, &FewShot)> = jobs
        .iter()
        .map(|j| (j.regime, &subsets[&j.ratio.to_bits()]))
        .collect();
    let outcomes = run_regimes(net_config, &pairs, &data.source_train, &data.target_val, cfg)?;
    jobs.iter()
        .zip(outcomes)
        .map(|(&job, outcome)| {
            let net = CounterNet::from_arch_string(&outcome.checkpoint.arch)?;
            let test = evaluate(&net, &outcome.target_params()?, &data.target_test)?;
            Ok(StudyResult { job, outcome, test })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_specs() -> (DomainSpec, DomainSpec) {
        let s = DomainSpec {
            image_size: (16, 16),
            count_range: (1, 8),
            ..DomainSpec::default_source()
        };
        let t = DomainSpec {
            image_size: (16, 16),
            count_range: (1, 4),
            ..DomainSpec::default_target()
        };
        (s, t)
    }

    #[test]
    fn build_filters_and_sizes() {
        let (s, t) = tiny_specs();
        let sizes = ExperimentSizes {
            source_train: 30,
            source_val: 0,
            source_test: 0,
            target_train: 10,
            target_val: 3,
            target_test: 4,
        };
        let d = ExperimentData::build(&s, &t, sizes, true, 1).unwrap();
        assert!(d.source_train.len() < 30);
        assert!(d.source_train.iter().all(|x| (1..=4).contains(&x.count)));
        assert_eq!((d.target_train.len(), d.target_val.len(), d.target_test.len()), (10, 3, 4));
        assert_eq!(d, ExperimentData::build(&s, &t, sizes, true, 1).unwrap());
    }

    #[test]
    fn study_rows_follow_jobs() {
        let (s, t) = tiny_specs();
        let sizes = ExperimentSizes {
            source_train: 12,
            source_val: 0,
            source_test: 0,
            target_train: 10,
            target_val: 2,
            target_test: 2,
        };
        let d = ExperimentData::build(&s, &t, sizes, false, 1).unwrap();
        let cfg = TrainConfig {
            iterations: 2,
            val_interval: 1,
            source_batch: 2,
            target_batch: 2,
            ..TrainConfig::desk()
        };
        let jobs = [
            StudyJob { regime: Regime::Nlt, ratio: 0.3 },
            StudyJob { regime: Regime::Supervised, ratio: 0.3 },
            StudyJob { regime: Regime::NoAdapt, ratio: 0.3 },
        ];
        let r = run_study(NetConfig::DeskSmall, &d, &cfg, &jobs).unwrap();
        assert_eq!(r.len(), 3);
        for (row, job) in r.iter().zip(&jobs) {
            assert_eq!(row.job, *job);
            assert_eq!(row.outcome.checkpoint.regime, job.regime);
            assert_eq!(row.test.n_images, 2);
        }
    }
}
