//! Repeated training runs that differ only in the seed.

use std::fmt;
use std::path::{Path, PathBuf};

use super::config::TrainConfig;
use super::train::{train_on, StepObserver};
use crate::data::SampleRecord;
use crate::error::{invalid, Result};

/// One-dimensional two-means split.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoMeans {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    /// Smallest value of the upper cluster minus largest of the lower one.
    pub gap: f64,
}

/// Exact two-means clustering of at least two values: the best split of
/// the sorted values by within-cluster sum of squares, earliest on ties.
pub fn two_means(values: &[f64]) -> Result<TwoMeans> {
    if values.len() < 2 || values.iter().any(|v| !v.is_finite()) {
        return Err(invalid!("two-means needs at least two finite values"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let sse = |s: &[f64]| {
        let m = s.iter().sum::<f64>() / s.len() as f64;
        s.iter().map(|x| (x - m).powi(2)).sum::<f64>()
    };
    let mut best = (f64::INFINITY, 1);
    for k in 1..v.len() {
        let cost = sse(&v[..k]) + sse(&v[k..]);
        if cost < best.0 - 1e-15 {
            best = (cost, k);
        }
    }
    let (low, high) = v.split_at(best.1);
    Ok(TwoMeans {
        gap: high[0] - low[low.len() - 1],
        low: low.to_vec(),
        high: high.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub epochs: u64,
    pub training_acc: f64,
    pub validation_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiSeedSummary {
    pub runs: Vec<SeedRun>,
    pub clusters: TwoMeans,
}

impl MultiSeedSummary {
    pub fn median_validation_acc(&self) -> f64 {
        let mut v: Vec<f64> = self.runs.iter().map(|r| r.validation_acc).collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
}

impl fmt::Display for MultiSeedSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>10} {:>7} {:>10} {:>10} {:>8}",
            "seed", "epochs", "train_acc", "val_acc", "cluster"
        )?;
        for r in &self.runs {
            let cluster = match self.clusters.high.first() {
                Some(&h) if self.clusters.gap > 0.0 && r.validation_acc >= h => "high",
                _ if self.clusters.gap > 0.0 => "low",
                _ => "-",
            };
            writeln!(
                f,
                "{:>10} {:>7} {:>10.4} {:>10.4} {:>8}",
                r.seed, r.epochs, r.training_acc, r.validation_acc, cluster
            )?;
        }
        writeln!(f, "cluster gap {:.4}", self.clusters.gap)
    }
}

fn with_suffix(path: &Path, seed: u64) -> PathBuf {
    if path.as_os_str().is_empty() {
        return PathBuf::new();
    }
    let mut s = path.as_os_str().to_owned();
    s.push(format!(".seed{seed}"));
    s.into()
}

/// Trains once per seed in `seeds`; output paths gain a `.seed<N>` suffix.
pub fn multi_seed_with(
    cfg: &TrainConfig,
    train: &[SampleRecord],
    val: &[SampleRecord],
    seeds: &[u64],
) -> Result<MultiSeedSummary> {
    if seeds.len() < 2 {
        return Err(invalid!("multi-seed runs need at least two seeds"));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let run_cfg = TrainConfig {
            seed,
            checkpoint: with_suffix(&cfg.checkpoint, seed),
            metrics: with_suffix(&cfg.metrics, seed),
            resume: None,
            ..cfg.clone()
        };
        let out = train_on(&run_cfg, train, val, &mut () as &mut dyn StepObserver)?;
        let last = out.rows.last().expect("at least one epoch");
        log::info!(
            "seed {seed}: validation accuracy {:.4}",
            last.validation_acc
        );
        runs.push(SeedRun {
            seed,
            epochs: last.epoch,
            training_acc: last.training_acc,
            validation_acc: last.validation_acc,
        });
    }
    let accs: Vec<f64> = runs.iter().map(|r| r.validation_acc).collect();
    Ok(MultiSeedSummary {
        clusters: two_means(&accs)?,
        runs,
    })
}

/// Trains with seeds `cfg.seed, cfg.seed + 1, ...`.
pub fn multi_seed_run(
    cfg: &TrainConfig,
    train: &[SampleRecord],
    val: &[SampleRecord],
    n_seeds: usize,
) -> Result<MultiSeedSummary> {
    let seeds: Vec<u64> = (0..n_seeds as u64)
        .map(|i| cfg.seed.wrapping_add(i))
        .collect();
    multi_seed_with(cfg, train, val, &seeds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_run_two_means() {
        let c = two_means(&[0.97, 0.85, 0.98, 0.86]).unwrap();
        assert_eq!(c.low, [0.85, 0.86]);
        assert_eq!(c.high, [0.97, 0.98]);
        assert!((c.gap - 0.11).abs() < 1e-12);
    }

    #[test]
    fn identical_values_have_no_gap() {
        let c = two_means(&[0.5, 0.5]).unwrap();
        assert_eq!(c.gap, 0.0);
        assert_eq!(c.low.len() + c.high.len(), 2);
        assert!(two_means(&[0.5]).is_err());
    }
}
