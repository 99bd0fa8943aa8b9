//! Command-line front end. Exit codes: 0 success, 1 check or validation
//! failure, 2 usage error, 3 I/O error.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use thinseg_core::gradcheck::{check_op, CheckSettings, OpCheck, OPS};
use thinseg_core::losses::{soft_skeleton_of, SkeletonConfig};
use thinseg_core::metrics::MetricSettings;
use thinseg_core::train::AblationAxis;

use crate::checkpoint::Checkpoint;
use crate::config::{echo, load_config, render};
use crate::error::Error;
use crate::pgm::{read_mask_bits, read_prob, write_prob};
use crate::report::{ablation_table, check_report, loss_curve, summary_text, Envelope, RunBody, SeedBody};
use crate::runner::{evaluate_pairs, pool, run_ablation, run_seeds};

#[derive(Debug, Parser)]
#[command(name = "thinseg", version, about = "Topology-aware thin-structure segmentation toolkit")]
pub struct Cli {
    /// Omit the timestamp from written reports so reruns are byte-identical.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Axis {
    Rank,
    #[value(name = "lambda_cl")]
    LambdaCl,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score probability maps or masks against ground-truth masks, matched
    /// by file stem (*.pgm).
    Eval {
        /// Directory of predictions.
        #[arg(required_unless_present = "check")]
        pred_dir: Option<PathBuf>,
        /// Directory of ground-truth masks.
        #[arg(required_unless_present = "check")]
        gt_dir: Option<PathBuf>,
        /// Foreground threshold on predicted probabilities.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Boundary F-score distance tolerance in pixels.
        #[arg(long, default_value_t = 2.0)]
        tolerance: f64,
        /// Number of calibration bins.
        #[arg(long, default_value_t = 10)]
        bins: usize,
        /// Soft-skeleton iterations for centerline Dice.
        #[arg(long, default_value_t = 10)]
        skeleton_iters: usize,
        /// Report file to write.
        #[arg(long, default_value = "eval-report.json")]
        out: PathBuf,
        /// Validate an existing report instead of evaluating.
        #[arg(long, value_name = "REPORT", conflicts_with_all = ["pred_dir", "gt_dir"])]
        check: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// Comma-separated op names; all ops when omitted.
        #[arg(long, value_delimiter = ',')]
        ops: Vec<String>,
        /// Random trials per op.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Base random seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Where failing cases are written.
        #[arg(long, default_value = "gradcheck-failure.json")]
        dump: PathBuf,
        /// List the available op names and exit.
        #[arg(long)]
        list: bool,
    },
    /// Write the soft skeleton of a mask or probability map as a 16-bit PGM.
    Skeletonize {
        input: PathBuf,
        out: PathBuf,
        /// Erosion rounds (at least 1).
        #[arg(long, default_value_t = 10)]
        iterations: usize,
    },
    /// Train the toy segmenter on synthetic data for every configured seed.
    SynthTrain {
        /// key = value configuration file; missing keys take defaults.
        config: PathBuf,
        out_dir: PathBuf,
    },
    /// Train one run per value of an ablation axis.
    Ablate {
        /// rank: 4, 8, 16, 32. lambda_cl: 0, 0.25, 0.5, 1, 2.
        #[arg(long, value_enum)]
        axis: Axis,
        config: PathBuf,
        out_dir: PathBuf,
    },
}

/// A failed command with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. }
        | Error::Malformed { .. }
        | Error::DimensionOverflow { .. }
        | Error::Manifest { .. }
        | Error::Checksum { .. }
        | Error::Version { .. } => 3,
        Error::Config(_) => 2,
        Error::Report { .. } => 1,
        Error::Core(c) => match c {
            thinseg_core::Error::BoundaryLossUnsupported | thinseg_core::Error::InvalidArgument { .. } => 2,
            _ => 1,
        },
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::new(exit_code(&e), e.to_string())
    }
}

impl From<thinseg_core::Error> for Failure {
    fn from(e: thinseg_core::Error) -> Self {
        Error::Core(e).into()
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn list_pgm(dir: &Path) -> Result<BTreeMap<String, PathBuf>, Failure> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_pgm = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
        if is_pgm && path.is_file() {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

fn cmd_eval(pred_dir: &Path, gt_dir: &Path, settings: MetricSettings, out: &Path, deterministic: bool) -> Result<(), Failure> {
    if !(settings.threshold > 0.0 && settings.threshold < 1.0) {
        return Err(Failure::new(2, "--threshold must lie in (0, 1)"));
    }
    if !(settings.tolerance > 0.0) || settings.ece_bins == 0 || settings.skeleton_iterations == 0 {
        return Err(Failure::new(2, "--tolerance, --bins and --skeleton-iters must be positive"));
    }
    let preds = list_pgm(pred_dir)?;
    let gts = list_pgm(gt_dir)?;
    let common: Vec<&String> = preds.keys().filter(|k| gts.contains_key(*k)).collect();
    if common.is_empty() {
        return Err(Failure::new(2, "no prediction and ground-truth files share a name"));
    }
    let orphans: Vec<String> = preds
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .map(|k| format!("{} (no ground truth)", preds[k].display()))
        .chain(
            gts.keys()
                .filter(|k| !preds.contains_key(*k))
                .map(|k| format!("{} (no prediction)", gts[k].display())),
        )
        .collect();
    if !orphans.is_empty() {
        return Err(Failure::new(3, format!("unmatched files:\n  {}", orphans.join("\n  "))));
    }
    let pairs = common
        .iter()
        .map(|id| -> Result<_, Failure> {
            let prob = read_prob(&preds[*id])?;
            let gt = read_mask_bits(&gts[*id])?;
            Ok(((*id).clone(), prob, gt))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let report = evaluate_pairs(&pairs, &settings)?;
    let config: BTreeMap<String, String> = [
        ("pred_dir", pred_dir.display().to_string()),
        ("gt_dir", gt_dir.display().to_string()),
        ("threshold", settings.threshold.to_string()),
        ("tolerance", settings.tolerance.to_string()),
        ("bins", settings.ece_bins.to_string()),
        ("skeleton_iters", settings.skeleton_iterations.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let text = summary_text(&report.aggregate);
    Envelope::new(config, report, deterministic).write(out)?;
    print!("{text}");
    Ok(())
}

fn cmd_gradcheck(ops: &[String], settings: &CheckSettings, dump: &Path) -> Result<(), Failure> {
    let names: Vec<&str> = if ops.is_empty() {
        OPS.to_vec()
    } else {
        ops.iter().map(String::as_str).collect()
    };
    if let Some(bad) = names.iter().find(|n| !OPS.contains(n)) {
        return Err(Failure::new(2, format!("unknown op {bad:?}; see --list")));
    }
    let results: Vec<OpCheck> = pool().install(|| {
        names
            .par_iter()
            .map(|op| check_op(op, settings))
            .collect::<thinseg_core::Result<Vec<_>>>()
    })?;
    let mut stdout = std::io::stdout().lock();
    for r in &results {
        let _ = writeln!(
            stdout,
            "{:<14} trials={} redrawn={} max_rel_err={:.3e} {}",
            r.op,
            r.trials,
            r.redrawn,
            r.max_rel_error,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    let failed: Vec<&OpCheck> = results.iter().filter(|r| !r.passed).collect();
    if failed.is_empty() {
        return Ok(());
    }
    let json = serde_json::to_string_pretty(&failed).expect("serializable");
    write_file(dump, &json)?;
    Err(Failure::new(
        1,
        format!("{} op(s) failed; worst cases written to {}", failed.len(), dump.display()),
    ))
}

fn cmd_skeletonize(input: &Path, out: &Path, iterations: usize) -> Result<(), Failure> {
    let cfg = SkeletonConfig::new(iterations).map_err(|e| Failure::new(2, e.to_string()))?;
    let x = read_prob(input)?;
    let skel = soft_skeleton_of(&x, &cfg)?;
    write_prob(&skel, out)?;
    Ok(())
}

fn cmd_synth_train(config: &Path, out_dir: &Path, deterministic: bool) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let run = run_seeds(&cfg)?;
    create_dir(out_dir)?;
    write_file(&out_dir.join("config.conf"), &render(&cfg))?;
    for s in &run.seeds {
        let dir = out_dir.join(format!("seed-{}", s.seed));
        create_dir(&dir)?;
        Envelope::new(echo(&cfg), SeedBody::new(s, run.budget), deterministic).write(&dir.join("report.json"))?;
        write_file(&dir.join("loss.tsv"), &loss_curve(s))?;
        Checkpoint::from_trainer(&s.trainer).save(&dir.join("checkpoint.bin"))?;
        for w in &s.report.warnings {
            eprintln!("warning: seed {}: {w}", s.seed);
        }
    }
    Envelope::new(echo(&cfg), RunBody::new(&run), deterministic).write(&out_dir.join("aggregate.json"))?;
    println!(
        "trainable parameters: {} of {} ({:.2}%)",
        run.budget.trainable,
        run.budget.total,
        100.0 * run.budget.fraction()
    );
    for s in &run.seeds {
        println!(
            "seed {}: loss {:.4} -> {:.4}",
            s.seed, s.initial_loss.total, s.final_loss.total
        );
    }
    print!("{}", summary_text(&run.summary));
    Ok(())
}

fn cmd_ablate(axis: Axis, config: &Path, out_dir: &Path, deterministic: bool) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let axis = match axis {
        Axis::Rank => AblationAxis::Rank,
        Axis::LambdaCl => AblationAxis::LambdaCl,
    };
    let (body, _) = run_ablation(axis, &cfg)?;
    create_dir(out_dir)?;
    let table = ablation_table(&body);
    let stem = format!("ablation-{}", axis.name());
    write_file(&out_dir.join(format!("{stem}.tsv")), &table)?;
    Envelope::new(echo(&cfg), body, deterministic).write(&out_dir.join(format!("{stem}.json")))?;
    print!("{table}");
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let det = cli.deterministic;
    match cli.command {
        Command::Eval {
            pred_dir,
            gt_dir,
            threshold,
            tolerance,
            bins,
            skeleton_iters,
            out,
            check,
        } => {
            if let Some(report) = check {
                let n = check_report(&report)?;
                println!("{}: valid report with {n} image(s)", report.display());
                return Ok(());
            }
            let settings = MetricSettings {
                threshold,
                tolerance,
                ece_bins: bins,
                skeleton_iterations: skeleton_iters,
            };
            let (p, g) = (pred_dir.expect("required by clap"), gt_dir.expect("required by clap"));
            cmd_eval(&p, &g, settings, &out, det)
        }
        Command::Gradcheck {
            ops,
            trials,
            seed,
            tolerance,
            dump,
            list,
        } => {
            if list {
                println!("{}", OPS.join("\n"));
                return Ok(());
            }
            let settings = CheckSettings {
                trials,
                seed,
                tolerance,
                ..CheckSettings::default()
            };
            cmd_gradcheck(&ops, &settings, &dump)
        }
        Command::Skeletonize { input, out, iterations } => cmd_skeletonize(&input, &out, iterations),
        Command::SynthTrain { config, out_dir } => cmd_synth_train(&config, &out_dir, det),
        Command::Ablate { axis, config, out_dir } => cmd_ablate(axis, &config, &out_dir, det),
    }
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
