//! Runs the desk regime study for one seed and prints target-test errors.
//!
//! Usage: `desk_study [seed] [iterations]`

use std::time::Instant;

use nlt_core::data::DomainSpec;
use nlt_core::experiment::{run_study, ExperimentData, ExperimentSizes, StudyJob};
use nlt_core::{NetConfig, Regime, TrainConfig};

fn main() -> nlt_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    let iterations: usize = args.next().map_or(3000, |s| s.parse().expect("iterations"));
    let data = ExperimentData::build(
        &DomainSpec::default_source(),
        &DomainSpec::default_target(),
        ExperimentSizes::default(),
        true,
        seed,
    )?;
    let cfg = TrainConfig {
        seed,
        iterations,
        ..TrainConfig::desk()
    };
    let mut jobs = vec![
        StudyJob { regime: Regime::NoAdapt, ratio: 0.1 },
        StudyJob { regime: Regime::FinetuneAll, ratio: 0.1 },
    ];
    for ratio in [0.05, 0.1, 0.3, 0.5] {
        jobs.push(StudyJob { regime: Regime::Nlt, ratio });
        jobs.push(StudyJob { regime: Regime::Supervised, ratio });
    }
    let t = Instant::now();
    let rows = run_study(NetConfig::DeskSmall, &data, &cfg, &jobs)?;
    for r in rows {
        println!(
            "{}\t{}\tmae={:.3}\tmse={:.3}\tbest_iter={}\tval_mae={:.3}",
            r.job.regime,
            r.job.ratio,
            r.test.mae,
            r.test.mse,
            r.outcome.checkpoint.iteration,
            r.outcome.checkpoint.metric("val_mae").unwrap_or(f64::NAN)
        );
    }
    eprintln!("source_train={} elapsed={:.1}s", data.source_train.len(), t.elapsed().as_secs_f64());
    Ok(())
}
