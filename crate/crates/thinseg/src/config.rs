//! Flat `key = value` run configuration. Unset keys take their defaults;
//! `#` starts a comment. [`echo`] lists every key with its effective value.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thinseg_core::losses::SkeletonConfig;
use thinseg_core::train::TrainConfig;

use crate::error::{Error, Result};

pub const KEYS: &[&str] = &[
    "lr",
    "lr_min",
    "weight_decay",
    "beta1",
    "beta2",
    "adam_eps",
    "steps",
    "batch",
    "seeds",
    "lambda_bce",
    "lambda_dice",
    "lambda_cl",
    "lambda_bd",
    "skeleton_iters",
    "lora_rank",
    "lora_layers",
    "channels",
    "clip_norm",
    "height",
    "width",
    "n_curves",
    "width_min",
    "width_max",
    "gap_probability",
    "noise_sigma",
    "data_seed",
    "train_samples",
    "val_samples",
    "threshold",
    "tolerance",
    "ece_bins",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn set(cfg: &mut TrainConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "lr" => cfg.lr = parse(key, v)?,
        "lr_min" => cfg.lr_min = parse(key, v)?,
        "weight_decay" => cfg.weight_decay = parse(key, v)?,
        "beta1" => cfg.beta1 = parse(key, v)?,
        "beta2" => cfg.beta2 = parse(key, v)?,
        "adam_eps" => cfg.adam_eps = parse(key, v)?,
        "steps" => cfg.steps = parse(key, v)?,
        "batch" => cfg.batch = parse(key, v)?,
        "seeds" => {
            cfg.seeds = v
                .split(',')
                .map(|s| parse(key, s.trim()))
                .collect::<Result<Vec<u64>>>()?
        }
        "lambda_bce" => cfg.loss_weights.bce = parse(key, v)?,
        "lambda_dice" => cfg.loss_weights.dice = parse(key, v)?,
        "lambda_cl" => cfg.loss_weights.cl_dice = parse(key, v)?,
        "lambda_bd" => cfg.loss_weights.boundary = parse(key, v)?,
        "skeleton_iters" => {
            cfg.skeleton = SkeletonConfig::new(parse(key, v)?)?;
            cfg.metrics.skeleton_iterations = cfg.skeleton.iterations();
        }
        "lora_rank" => cfg.lora_rank = parse(key, v)?,
        "lora_layers" => cfg.lora_layers = parse(key, v)?,
        "channels" => cfg.channels = parse(key, v)?,
        "clip_norm" => cfg.clip_norm = if v == "none" { None } else { Some(parse(key, v)?) },
        "height" => cfg.synth.height = parse(key, v)?,
        "width" => cfg.synth.width = parse(key, v)?,
        "n_curves" => cfg.synth.n_curves = parse(key, v)?,
        "width_min" => cfg.synth.width_range[0] = parse(key, v)?,
        "width_max" => cfg.synth.width_range[1] = parse(key, v)?,
        "gap_probability" => cfg.synth.gap_probability = parse(key, v)?,
        "noise_sigma" => cfg.synth.noise_sigma = parse(key, v)?,
        "data_seed" => cfg.synth.seed = parse(key, v)?,
        "train_samples" => cfg.train_samples = parse(key, v)?,
        "val_samples" => cfg.val_samples = parse(key, v)?,
        "threshold" => cfg.metrics.threshold = parse(key, v)?,
        "tolerance" => cfg.metrics.tolerance = parse(key, v)?,
        "ece_bins" => cfg.metrics.ece_bins = parse(key, v)?,
        other => return Err(Error::Config(format!("unknown key {other:?}"))),
    }
    Ok(())
}

/// Parses and validates a configuration.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut seen = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if seen.insert(k.to_string(), ()).is_some() {
            return Err(Error::Config(format!("line {}: {k} set twice", i + 1)));
        }
        set(&mut cfg, k, v).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
            other => other,
        })?;
    }
    cfg.validate()?;
    if !(cfg.metrics.threshold > 0.0 && cfg.metrics.threshold < 1.0) {
        return Err(Error::Config("threshold must lie in (0, 1)".into()));
    }
    if !(cfg.metrics.tolerance > 0.0) || cfg.metrics.ece_bins == 0 {
        return Err(Error::Config("tolerance must be > 0 and ece_bins >= 1".into()));
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Every key with its effective value.
pub fn echo(cfg: &TrainConfig) -> BTreeMap<String, String> {
    let w = &cfg.loss_weights;
    let s = &cfg.synth;
    let m = &cfg.metrics;
    let seeds: Vec<String> = cfg.seeds.iter().map(u64::to_string).collect();
    let values: Vec<String> = vec![
        cfg.lr.to_string(),
        cfg.lr_min.to_string(),
        cfg.weight_decay.to_string(),
        cfg.beta1.to_string(),
        cfg.beta2.to_string(),
        cfg.adam_eps.to_string(),
        cfg.steps.to_string(),
        cfg.batch.to_string(),
        seeds.join(","),
        w.bce.to_string(),
        w.dice.to_string(),
        w.cl_dice.to_string(),
        w.boundary.to_string(),
        cfg.skeleton.iterations().to_string(),
        cfg.lora_rank.to_string(),
        cfg.lora_layers.to_string(),
        cfg.channels.to_string(),
        cfg.clip_norm.map_or("none".into(), |c| c.to_string()),
        s.height.to_string(),
        s.width.to_string(),
        s.n_curves.to_string(),
        s.width_range[0].to_string(),
        s.width_range[1].to_string(),
        s.gap_probability.to_string(),
        s.noise_sigma.to_string(),
        s.seed.to_string(),
        cfg.train_samples.to_string(),
        cfg.val_samples.to_string(),
        m.threshold.to_string(),
        m.tolerance.to_string(),
        m.ece_bins.to_string(),
    ];
    KEYS.iter().map(|k| k.to_string()).zip(values).collect()
}

/// Renders the echo back into config-file syntax.
pub fn render(cfg: &TrainConfig) -> String {
    echo(cfg).iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// SHA-256 of the rendered configuration.
pub fn config_hash(cfg: &TrainConfig) -> [u8; 32] {
    Sha256::digest(render(cfg).as_bytes()).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
