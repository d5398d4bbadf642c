//! Training, evaluation, reporting and run configuration.

mod checkpoint;
mod config;
mod gradsuite;
mod metrics;
mod multiseed;
mod report;
mod train;

pub use checkpoint::{Checkpoint, Progress, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{parse_lines, parse_model, render_model_config, RunConfig, TrainConfig};
pub use gradsuite::{
    gradcheck_model, gradcheck_suite, model_check, primitive_checks, GradCase, GradScale,
    GRADCHECK_TOLERANCE,
};
pub use metrics::{
    emit_metrics_csv, metrics_csv, parse_metrics_csv, read_metrics_csv, MetricsRow, METRICS_HEADER,
};
pub use multiseed::{
    multi_seed_run, multi_seed_with, two_means, MultiSeedSummary, SeedRun, TwoMeans,
};
pub use report::{Category, CategoryReport, Tally};
pub use train::{
    batch_gradients, epoch_order, evaluate, evaluate_checkpoint, mix_seed, train, train_on,
    BatchStats, EpochLog, Evaluation, StepContext, StepObserver, TrainOutcome,
};

use crate::data::{read_dataset, SampleRecord};
use crate::error::Result;
use std::path::Path;

/// Per-category accuracy of a checkpoint on a dataset.
pub fn report_for(ck: &Checkpoint, samples: &[SampleRecord]) -> Result<CategoryReport> {
    let eval = evaluate_checkpoint(ck, samples)?;
    let correct: Vec<bool> = eval
        .predictions
        .iter()
        .zip(samples)
        .map(|(p, s)| *p == s.target)
        .collect();
    let meta: Vec<&[crate::data::StructureTriple]> =
        samples.iter().map(|s| s.triples.as_slice()).collect();
    CategoryReport::from_outcomes(&meta, &correct)
}

/// Loads both files and reports per-category accuracy.
pub fn evaluate_by_category(
    checkpoint: impl AsRef<Path>,
    dataset: impl AsRef<Path>,
) -> Result<CategoryReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let samples = read_dataset(dataset)?;
    report_for(&ck, &samples)
}
