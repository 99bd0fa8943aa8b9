//! Parallel execution of seeds, ablation cells and per-image evaluation.
//! Results are collected in input order, so output does not depend on the
//! thread count.

use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuilder};
use thinseg_core::metrics::{aggregate, evaluate_image, Mask, MetricReport, MetricSettings};
use thinseg_core::train::{train_seed, AblationAxis, Dataset, RunResult, TrainConfig};
use thinseg_core::Tensor;

use crate::error::Result;
use crate::report::{AblationBody, AblationRow};

/// Overrides the worker count.
pub const THREADS_ENV: &str = "THINSEG_THREADS";

pub fn pool() -> ThreadPool {
    let n = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .expect("thread pool")
}

pub fn run_seeds(cfg: &TrainConfig) -> Result<RunResult> {
    cfg.validate()?;
    let data = Dataset::synthetic(cfg)?;
    let seeds = pool().install(|| {
        cfg.seeds
            .par_iter()
            .map(|&s| train_seed(cfg, &data, s))
            .collect::<thinseg_core::Result<Vec<_>>>()
    })?;
    Ok(RunResult::from_seeds(cfg, seeds)?)
}

/// One row per axis value in ascending order, every (value, seed) pair
/// trained in parallel.
pub fn run_ablation(axis: AblationAxis, base: &TrainConfig) -> Result<(AblationBody, Vec<RunResult>)> {
    base.validate()?;
    let cells = axis.cells(base)?;
    let data = Dataset::synthetic(base)?;
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| base.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results = pool().install(|| {
        jobs.par_iter()
            .map(|&(c, s)| train_seed(&cells[c].1, &data, s))
            .collect::<thinseg_core::Result<Vec<_>>>()
    })?;
    let mut per_cell: Vec<Vec<_>> = vec![Vec::new(); cells.len()];
    for ((c, _), r) in jobs.iter().zip(results) {
        per_cell[*c].push(r);
    }
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for ((value, cfg), seeds) in cells.iter().zip(per_cell) {
        let run = RunResult::from_seeds(cfg, seeds)?;
        let final_loss_mean = run.seeds.iter().map(|s| s.final_loss.total).sum::<f64>() / run.seeds.len() as f64;
        rows.push(AblationRow {
            value: *value,
            trainable_params: run.budget.trainable,
            cl_weight: cfg.loss_weights.cl_dice,
            final_loss_mean,
            summary: run.summary.clone(),
        });
        runs.push(run);
    }
    Ok((
        AblationBody {
            axis: axis.name().into(),
            rows,
        },
        runs,
    ))
}

/// Scores named probability maps against masks.
pub fn evaluate_pairs(pairs: &[(String, Tensor, Mask)], settings: &MetricSettings) -> Result<MetricReport> {
    let scored = pool().install(|| {
        pairs
            .par_iter()
            .map(|(id, prob, gt)| evaluate_image(id, prob, gt, settings))
            .collect::<thinseg_core::Result<Vec<_>>>()
    })?;
    let mut images = Vec::new();
    let mut warnings = Vec::new();
    for (m, w) in scored {
        images.push(m);
        warnings.extend(w);
    }
    Ok(aggregate(images, warnings)?)
}
