//! Seeded training runs of the toy segmenter on synthetic data, validation
//! with the full metric suite, and ablation grids.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::losses::{combined_loss_from_logits, LossEps, LossWeights, SkeletonConfig};
use crate::metrics::{aggregate, evaluate_image, summarize, AggregateMetrics, ImageMetrics, MetricReport, MetricSettings};
use crate::model::{ModelConfig, ToyModel};
use crate::optim::{adamw_step, clip_global_norm, cosine_lr, AdamW, OptState};
use crate::peft::ParamBudget;
use crate::synth::{synth_sample, SynthConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub steps: u64,
    pub batch: usize,
    pub seeds: Vec<u64>,
    pub loss_weights: LossWeights,
    pub skeleton: SkeletonConfig,
    pub lora_rank: usize,
    pub lora_layers: usize,
    pub channels: usize,
    /// Global gradient-norm limit; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub synth: SynthConfig,
    pub train_samples: usize,
    pub val_samples: usize,
    pub metrics: MetricSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-3,
            lr_min: 1e-6,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            steps: 200,
            batch: 4,
            seeds: vec![0, 1, 2],
            loss_weights: LossWeights::default(),
            skeleton: SkeletonConfig::default(),
            lora_rank: 16,
            lora_layers: 2,
            channels: 32,
            clip_norm: None,
            synth: SynthConfig::default(),
            train_samples: 32,
            val_samples: 16,
            metrics: MetricSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::invalid("train config", reason));
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr && self.lr.is_finite()) {
            return bad("need 0 < lr_min <= lr");
        }
        self.adamw().validate()?;
        if self.batch == 0 {
            return bad("batch must be >= 1");
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.train_samples == 0 || self.val_samples == 0 {
            return bad("train and validation splits must be nonempty");
        }
        if self.lora_rank == 0 || self.lora_rank > self.channels {
            return bad("lora_rank must lie in 1..=channels");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip_norm must be > 0");
            }
        }
        self.loss_weights.validate()?;
        self.synth.validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            lora_layers: self.lora_layers,
            rank: self.lora_rank,
            alpha: None,
        }
    }

    /// Optimizer settings at the peak learning rate.
    pub fn adamw(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// An image with its target, both `[1, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub image: Tensor,
    pub target: Tensor,
}

/// Training and validation examples drawn from one synthetic stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

impl Dataset {
    pub fn synthetic(cfg: &TrainConfig) -> Result<Self> {
        let make = |i: usize| -> Result<Example> {
            let s = synth_sample(&cfg.synth, i)?;
            let target = s.mask.reshape(s.image.shape().to_vec())?;
            Ok(Example {
                id: s.id,
                image: s.image,
                target,
            })
        };
        let n = cfg.train_samples;
        Ok(Dataset {
            train: (0..n).map(make).collect::<Result<_>>()?,
            val: (n..n + cfg.val_samples).map(make).collect::<Result<_>>()?,
        })
    }
}

/// Batch-mean loss terms of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub bce: f64,
    pub dice: f64,
    pub cl_dice: f64,
}

/// Mean loss terms over a set of examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub bce: f64,
    pub dice: f64,
    pub cl_dice: f64,
}

/// Model, optimizer state and schedule position of one seeded run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub seed: u64,
    pub model: ToyModel,
    pub opt: OptState,
}

fn diverged(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged {
            step,
            total: f64::NAN,
            bce: f64::NAN,
            dice: f64::NAN,
            cl_dice: f64::NAN,
        },
        other => other,
    }
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let model = ToyModel::new(cfg.model_config(), seed)?;
        let opt = OptState::new(&model.trainable());
        Ok(Trainer {
            cfg: cfg.clone(),
            seed,
            model,
            opt,
        })
    }

    /// Resumes from saved state; shapes must match the configuration.
    pub fn from_parts(cfg: &TrainConfig, seed: u64, model: ToyModel, opt: OptState) -> Result<Self> {
        cfg.validate()?;
        let fresh = ToyModel::new(cfg.model_config(), seed)?;
        let same_shapes = |a: Vec<&Tensor>, b: Vec<&Tensor>| {
            a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.shape() == y.shape())
        };
        if !same_shapes(fresh.trainable(), model.trainable())
            || !same_shapes(model.trainable(), opt.m.iter().collect())
            || !same_shapes(model.trainable(), opt.v.iter().collect())
        {
            return Err(Error::invalid("trainer", "saved state does not match the configuration"));
        }
        Ok(Trainer {
            cfg: cfg.clone(),
            seed,
            model,
            opt,
        })
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    pub fn is_done(&self) -> bool {
        self.opt.step >= self.cfg.steps
    }

    /// Training examples used at `step`; a pure function of seed and step.
    pub fn batch_indices(&self, step: u64, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5EED_BA7C);
        rng.set_stream(step);
        (0..self.cfg.batch).map(|_| rng.random_range(0..n)).collect()
    }

    fn example_loss(&self, ex: &Example, grads: Option<&mut Vec<Tensor>>) -> Result<LossValues> {
        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape);
        let x = tape.constant(ex.image.clone());
        let logits = self.model.forward(&mut tape, &vars, x)?;
        let (loss, _) = combined_loss_from_logits(
            &mut tape,
            logits,
            &ex.target,
            &self.cfg.loss_weights,
            &self.cfg.skeleton,
            &LossEps::default(),
        )?;
        let values = LossValues {
            total: loss.total_value(&tape),
            bce: loss.bce,
            dice: loss.dice,
            cl_dice: loss.cl_dice,
        };
        if let Some(acc) = grads {
            let g = tape.backward(loss.total)?;
            for (slot, v) in acc.iter_mut().zip(&vars.trainable) {
                if let Some(gv) = g.get(*v) {
                    for (a, b) in slot.data_mut().iter_mut().zip(gv.data()) {
                        *a += b;
                    }
                }
            }
        }
        Ok(values)
    }

    /// One optimizer step on a batch drawn from `train`.
    pub fn train_step(&mut self, train: &[Example]) -> Result<StepLog> {
        if train.is_empty() {
            return Err(Error::EmptyTensor { op: "train_step" });
        }
        let step = self.opt.step;
        let lr = cosine_lr(step.min(self.cfg.steps), self.cfg.steps, self.cfg.lr, self.cfg.lr_min)?;
        let mut grads: Vec<Tensor> = self
            .model
            .trainable()
            .iter()
            .map(|t| Tensor::from_fn(t.shape().to_vec(), |_| 0.0))
            .collect::<Result<_>>()?;
        let idx = self.batch_indices(step, train.len());
        let mut sum = LossValues {
            total: 0.0,
            bce: 0.0,
            dice: 0.0,
            cl_dice: 0.0,
        };
        for &i in &idx {
            let v = self.example_loss(&train[i], Some(&mut grads)).map_err(|e| diverged(step, e))?;
            sum.total += v.total;
            sum.bce += v.bce;
            sum.dice += v.dice;
            sum.cl_dice += v.cl_dice;
        }
        let n = idx.len() as f64;
        let log = StepLog {
            step,
            lr,
            total: sum.total / n,
            bce: sum.bce / n,
            dice: sum.dice / n,
            cl_dice: sum.cl_dice / n,
        };
        let finite = [log.total, log.bce, log.dice, log.cl_dice].iter().all(|v| v.is_finite());
        let grads_finite = grads.iter().all(|g| g.data().iter().all(|v| v.is_finite()));
        if !finite || !grads_finite {
            return Err(Error::Diverged {
                step,
                total: log.total,
                bce: log.bce,
                dice: log.dice,
                cl_dice: log.cl_dice,
            });
        }
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|v| *v /= n);
        }
        if let Some(c) = self.cfg.clip_norm {
            clip_global_norm(&mut grads, c)?;
        }
        let hyper = AdamW {
            lr,
            ..self.cfg.adamw()
        };
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        let mut params = self.model.trainable_mut();
        adamw_step(&mut params, &grad_refs, &mut self.opt, &hyper)?;
        Ok(log)
    }

    /// Runs the remaining steps.
    pub fn run(&mut self, train: &[Example]) -> Result<Vec<StepLog>> {
        let mut curve = Vec::new();
        while !self.is_done() {
            curve.push(self.train_step(train)?);
        }
        Ok(curve)
    }

    /// Mean loss terms over `data` with the current weights.
    pub fn dataset_loss(&self, data: &[Example]) -> Result<LossValues> {
        if data.is_empty() {
            return Err(Error::EmptyTensor { op: "dataset_loss" });
        }
        let mut sum = LossValues {
            total: 0.0,
            bce: 0.0,
            dice: 0.0,
            cl_dice: 0.0,
        };
        for ex in data {
            let v = self.example_loss(ex, None)?;
            sum.total += v.total;
            sum.bce += v.bce;
            sum.dice += v.dice;
            sum.cl_dice += v.cl_dice;
        }
        let n = data.len() as f64;
        Ok(LossValues {
            total: sum.total / n,
            bce: sum.bce / n,
            dice: sum.dice / n,
            cl_dice: sum.cl_dice / n,
        })
    }

    /// Full metric suite on `data`.
    pub fn evaluate(&self, data: &[Example]) -> Result<MetricReport> {
        evaluate_model(&self.model, data, &self.cfg.metrics)
    }
}

pub fn evaluate_model(model: &ToyModel, data: &[Example], settings: &MetricSettings) -> Result<MetricReport> {
    let mut images: Vec<ImageMetrics> = Vec::with_capacity(data.len());
    let mut warnings = Vec::new();
    for ex in data {
        let prob = model.predict(&ex.image)?;
        let gt = crate::metrics::Mask::from_tensor(&ex.target)?;
        let (m, w) = evaluate_image(&ex.id, &prob, &gt, settings)?;
        images.push(m);
        warnings.extend(w);
    }
    aggregate(images, warnings)
}

/// Outcome of one seeded run.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub curve: Vec<StepLog>,
    pub initial_loss: LossValues,
    pub final_loss: LossValues,
    pub report: MetricReport,
    pub trainer: Trainer,
}

pub fn train_seed(cfg: &TrainConfig, data: &Dataset, seed: u64) -> Result<SeedResult> {
    let mut trainer = Trainer::new(cfg, seed)?;
    let initial_loss = trainer.dataset_loss(&data.train)?;
    let curve = trainer.run(&data.train)?;
    let final_loss = trainer.dataset_loss(&data.train)?;
    let report = trainer.evaluate(&data.val)?;
    Ok(SeedResult {
        seed,
        curve,
        initial_loss,
        final_loss,
        report,
        trainer,
    })
}

/// Per-seed results plus the across-seed summary of each metric's mean.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub seeds: Vec<SeedResult>,
    pub summary: AggregateMetrics,
    pub budget: ParamBudget,
}

impl RunResult {
    pub fn from_seeds(cfg: &TrainConfig, mut seeds: Vec<SeedResult>) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::EmptyTensor { op: "run result" });
        }
        seeds.sort_by_key(|s| s.seed);
        let col = |name: &str| -> Result<crate::metrics::Summary> {
            let v: Vec<f64> = seeds
                .iter()
                .map(|s| s.report.aggregate.get(name).expect("known metric").mean)
                .collect();
            summarize(&v)
        };
        let summary = AggregateMetrics {
            dice: col("dice")?,
            iou: col("iou")?,
            precision: col("precision")?,
            recall: col("recall")?,
            bf_score: col("bf_score")?,
            cl_dice: col("cl_dice")?,
            ece: col("ece")?,
        };
        Ok(RunResult {
            seeds,
            summary,
            budget: cfg.model_config().budget(),
        })
    }
}

/// Trains every seed in turn.
pub fn train_run(cfg: &TrainConfig) -> Result<RunResult> {
    cfg.validate()?;
    let data = Dataset::synthetic(cfg)?;
    let seeds = cfg
        .seeds
        .iter()
        .map(|&s| train_seed(cfg, &data, s))
        .collect::<Result<Vec<_>>>()?;
    RunResult::from_seeds(cfg, seeds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Rank,
    LambdaCl,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rank" => Ok(AblationAxis::Rank),
            "lambda_cl" => Ok(AblationAxis::LambdaCl),
            other => Err(Error::invalid("ablate", format!("unknown axis {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::Rank => "rank",
            AblationAxis::LambdaCl => "lambda_cl",
        }
    }

    /// Axis values in ascending order.
    pub fn values(&self) -> &'static [f64] {
        match self {
            AblationAxis::Rank => &[4.0, 8.0, 16.0, 32.0],
            AblationAxis::LambdaCl => &[0.0, 0.25, 0.5, 1.0, 2.0],
        }
    }

    /// One configuration per axis value, everything else held fixed.
    pub fn cells(&self, base: &TrainConfig) -> Result<Vec<(f64, TrainConfig)>> {
        self.values()
            .iter()
            .map(|&v| {
                let mut cfg = base.clone();
                match self {
                    AblationAxis::Rank => cfg.lora_rank = v as usize,
                    AblationAxis::LambdaCl => cfg.loss_weights.cl_dice = v,
                }
                cfg.validate()?;
                Ok((v, cfg))
            })
            .collect()
    }
}
