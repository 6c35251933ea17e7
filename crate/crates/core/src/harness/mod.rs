//! Synthetic-data experiments: generation, training, evaluation.

pub mod config;
pub mod data;
pub mod report;
pub mod train;

pub use config::{Ablation, DataConfig, DataMode, ExperimentConfig};
pub use data::{generate, Dataset};
pub use report::{check_compatible, evaluate, evaluate_self, DirectionReport, MetricsReport, SanityReport};
pub use train::{train, EpochLog, TrainOutcome};

use crate::error::Result;
use crate::exec::Exec;

/// Generates the dataset, trains, and evaluates on the held-out split.
/// Also evaluates the untrained initialization for reference.
pub fn run(cfg: &ExperimentConfig, exec: Exec) -> Result<RunResult> {
    let data = generate(cfg)?;
    let outcome = train(cfg, &data.train)?;
    let report = evaluate(cfg, &outcome.params, &data.test, exec)?;
    let untrained = evaluate(cfg, &train::init_params(cfg)?, &data.test, exec)?;
    Ok(RunResult { outcome, report, untrained })
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub report: MetricsReport,
    pub untrained: MetricsReport,
}
