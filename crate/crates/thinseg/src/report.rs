//! JSON reports and the plain-text metric summary.
//!
//! Every report is an object with `tool`, `version`, an optional
//! `generated_unix` timestamp, a `config` echo, and a body. Metric reports
//! carry `images` (one object per image) and `aggregate` (`mean`/`std` per
//! metric).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thinseg_core::metrics::{aggregate, AggregateMetrics, ImageMetrics, MetricReport};
use thinseg_core::peft::ParamBudget;
use thinseg_core::train::{LossValues, RunResult, SeedResult};

use crate::error::{Error, Result};

pub const TOOL: &str = "thinseg";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub tool: String,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_unix: Option<u64>,
    pub config: BTreeMap<String, String>,
    #[serde(flatten)]
    pub body: T,
}

impl<T: Serialize> Envelope<T> {
    pub fn new(config: BTreeMap<String, String>, body: T, deterministic: bool) -> Self {
        let generated_unix = (!deterministic).then(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        });
        Envelope {
            tool: TOOL.into(),
            version: VERSION.into(),
            generated_unix,
            config,
            body,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedBody {
    pub seed: u64,
    pub steps: u64,
    pub budget: ParamBudget,
    pub initial_loss: LossValues,
    pub final_loss: LossValues,
    #[serde(flatten)]
    pub metrics: MetricReport,
}

impl SeedBody {
    pub fn new(r: &SeedResult, budget: ParamBudget) -> Self {
        SeedBody {
            seed: r.seed,
            steps: r.trainer.step(),
            budget,
            initial_loss: r.initial_loss,
            final_loss: r.final_loss,
            metrics: r.report.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub initial_loss: LossValues,
    pub final_loss: LossValues,
    pub aggregate: AggregateMetrics,
    pub warnings: usize,
}

/// Across-seed summary: `summary` holds mean and std of the per-seed means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunBody {
    pub budget: ParamBudget,
    pub seeds: Vec<SeedSummary>,
    pub summary: AggregateMetrics,
}

impl RunBody {
    pub fn new(r: &RunResult) -> Self {
        RunBody {
            budget: r.budget,
            seeds: r
                .seeds
                .iter()
                .map(|s| SeedSummary {
                    seed: s.seed,
                    initial_loss: s.initial_loss,
                    final_loss: s.final_loss,
                    aggregate: s.report.aggregate.clone(),
                    warnings: s.report.warnings.len(),
                })
                .collect(),
            summary: r.summary.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: f64,
    pub trainable_params: u64,
    pub cl_weight: f64,
    pub final_loss_mean: f64,
    pub summary: AggregateMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationBody {
    pub axis: String,
    pub rows: Vec<AblationRow>,
}

/// Tab-separated ablation table with a header line.
pub fn ablation_table(body: &AblationBody) -> String {
    let mut out = format!("{}\ttrainable_params\tcl_weight\tfinal_loss", body.axis);
    for m in ImageMetrics::NAMES {
        out.push_str(&format!("\t{m}_mean\t{m}_std"));
    }
    out.push('\n');
    for r in &body.rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.6}",
            r.value, r.trainable_params, r.cl_weight, r.final_loss_mean
        ));
        for m in ImageMetrics::NAMES {
            let s = r.summary.get(m).expect("known metric");
            out.push_str(&format!("\t{:.6}\t{:.6}", s.mean, s.std));
        }
        out.push('\n');
    }
    out
}

/// One metric per line: `name mean=... std=...`.
pub fn summary_text(agg: &AggregateMetrics) -> String {
    ImageMetrics::NAMES
        .iter()
        .map(|m| {
            let s = agg.get(m).expect("known metric");
            format!("{m:<9} mean={:.6} std={:.6}\n", s.mean, s.std)
        })
        .collect()
}

/// Loss curve as tab-separated text.
pub fn loss_curve(r: &SeedResult) -> String {
    let mut out = String::from("step\tlr\ttotal\tbce\tdice\tcl_dice\n");
    for s in &r.curve {
        out.push_str(&format!(
            "{}\t{:e}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\n",
            s.step, s.lr, s.total, s.bce, s.dice, s.cl_dice
        ));
    }
    out
}

#[derive(Debug, Deserialize)]
struct CheckedBody {
    images: Vec<ImageMetrics>,
    aggregate: AggregateMetrics,
    #[serde(default)]
    warnings: Vec<String>,
}

/// Validates a metric report file: schema, value ranges, unique ids and
/// an aggregate that matches the per-image values. Returns the image count.
pub fn check_report(path: &Path) -> Result<usize> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Report {
        path: path.into(),
        reason,
    };
    let env: Envelope<CheckedBody> = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if env.tool != TOOL {
        return Err(bad(format!("tool is {:?}", env.tool)));
    }
    let body = env.body;
    if body.images.is_empty() {
        return Err(bad("no images".into()));
    }
    let mut ids: Vec<&str> = body.images.iter().map(|m| m.id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(bad("duplicate image ids".into()));
    }
    for m in &body.images {
        if m.values().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(bad(format!("{}: metric outside [0, 1]", m.id)));
        }
    }
    let n = body.images.len();
    let recomputed = aggregate(body.images, body.warnings)?;
    for m in ImageMetrics::NAMES {
        let (a, b) = (recomputed.aggregate.get(m), body.aggregate.get(m));
        let (a, b) = (a.expect("known"), b.expect("known"));
        if (a.mean - b.mean).abs() > 1e-9 || (a.std - b.std).abs() > 1e-9 {
            return Err(bad(format!("aggregate {m} does not match the images")));
        }
    }
    Ok(n)
}
