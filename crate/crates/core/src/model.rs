//! A small per-pixel segmenter: frozen random channel lift, frozen linear
//! layers with trainable low-rank updates, a trainable spatial adapter and
//! a 1x1 output head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::peft::{
    adapter_forward, count_params, kaiming_uniform, lora_forward, AdapterParams, AdapterVars, LoraLayer,
    LoraVars, ParamBudget, ParamConfig,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub lora_layers: usize,
    pub rank: usize,
    /// LoRA scale numerator; `None` means `alpha = rank`.
    pub alpha: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 32,
            lora_layers: 2,
            rank: 16,
            alpha: None,
        }
    }
}

impl ModelConfig {
    pub fn param_config(&self) -> ParamConfig {
        let c = self.channels as u64;
        let l = self.lora_layers as u64;
        ParamConfig {
            d_in: c,
            d_out: c,
            rank: self.rank as u64,
            n_blocks: l,
            layers_per_block: 1,
            channels: c,
            head_params: c + 1,
            frozen_params: 2 * c + l * (c * c + c),
        }
    }

    pub fn budget(&self) -> ParamBudget {
        count_params(&self.param_config())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub stem_w: Tensor,
    pub stem_b: Tensor,
    pub lora: Vec<LoraLayer>,
    pub adapter: AdapterParams,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Tape handles for one forward pass. `trainable` follows
/// [`ToyModel::trainable_names`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    stem_w: Var,
    stem_b: Var,
    lora: Vec<LoraVars>,
    adapter: AdapterVars,
    head_w: Var,
    head_b: Var,
    pub trainable: Vec<Var>,
}

impl ToyModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let c = config.channels;
        if c == 0 || config.lora_layers == 0 {
            return Err(Error::invalid("toy model", "channels and lora_layers must be positive"));
        }
        let alpha = config.alpha.unwrap_or(config.rank as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem_w = kaiming_uniform(c, 1, &mut rng)?;
        let stem_b = Tensor::from_fn([c], |_| rng.random_range(-1.0..1.0))?;
        let mut lora = Vec::with_capacity(config.lora_layers);
        for _ in 0..config.lora_layers {
            let w0 = kaiming_uniform(c, c, &mut rng)?;
            let b0 = Tensor::from_fn([c], |_| rng.random_range(-0.1..0.1))?;
            lora.push(LoraLayer::new(w0, b0, config.rank, alpha, rng.random())?);
        }
        let adapter = AdapterParams::init(c, rng.random())?;
        let head_w = kaiming_uniform(1, c, &mut rng)?;
        let head_b = Tensor::zeros([1])?;
        Ok(ToyModel {
            config,
            stem_w: stem_w.reshape([c, 1])?,
            stem_b,
            lora,
            adapter,
            head_w,
            head_b,
        })
    }

    /// Names of the trainable tensors, in a fixed order.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.lora.len() {
            names.push(format!("lora{i}.a"));
            names.push(format!("lora{i}.b"));
        }
        for n in ["adapter.dw_w", "adapter.dw_b", "adapter.pw_w", "adapter.pw_b", "head.w", "head.b"] {
            names.push(n.into());
        }
        names
    }

    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.lora {
            out.push(l.a());
            out.push(l.b());
        }
        let a = &self.adapter;
        out.extend([&a.dw_w, &a.dw_b, &a.pw_w, &a.pw_b, &self.head_w, &self.head_b]);
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.lora {
            let (a, b) = l.factors_mut();
            out.push(a);
            out.push(b);
        }
        let a = &mut self.adapter;
        out.extend([
            &mut a.dw_w,
            &mut a.dw_b,
            &mut a.pw_w,
            &mut a.pw_b,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }

    /// Frozen tensors with their names.
    pub fn frozen(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("stem.w".into(), &self.stem_w), ("stem.b".into(), &self.stem_b)];
        for (i, l) in self.lora.iter().enumerate() {
            out.push((format!("lora{i}.w0"), l.w0()));
            out.push((format!("lora{i}.b0"), l.b0()));
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().iter().map(|t| t.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let stem_w = tape.constant(self.stem_w.clone());
        let stem_b = tape.constant(self.stem_b.clone());
        let lora: Vec<LoraVars> = self.lora.iter().map(|l| l.bind(tape)).collect();
        let adapter = self.adapter.bind(tape);
        let head_w = tape.param(self.head_w.clone());
        let head_b = tape.param(self.head_b.clone());
        let mut trainable = Vec::new();
        for l in &lora {
            trainable.push(l.a);
            trainable.push(l.b);
        }
        trainable.extend([adapter.dw_w, adapter.dw_b, adapter.pw_w, adapter.pw_b, head_w, head_b]);
        ModelVars {
            stem_w,
            stem_b,
            lora,
            adapter,
            head_w,
            head_b,
            trainable,
        }
    }

    /// Logits `[1, H, W]` for an image `[1, H, W]`.
    pub fn forward(&self, tape: &mut Tape, vars: &ModelVars, image: Var) -> Result<Var> {
        let (_, h, w) = tape.value(image).chw()?;
        let c = self.config.channels;
        let stem = tape.conv_pw1x1(image, vars.stem_w, vars.stem_b)?;
        let mut feat = tape.relu(stem)?;
        feat = tape.reshape(feat, [c, h * w])?;
        for l in &vars.lora {
            let z = lora_forward(tape, l, feat)?;
            feat = tape.relu(z)?;
        }
        let feat = tape.reshape(feat, [c, h, w])?;
        let feat = adapter_forward(tape, &vars.adapter, feat)?;
        tape.conv_pw1x1(feat, vars.head_w, vars.head_b)
    }

    /// Foreground probabilities `[1, H, W]`.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = tape.constant(image.clone());
        let logits = self.forward(&mut tape, &vars, x)?;
        let p = tape.sigmoid(logits)?;
        Ok(tape.value(p).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_counts() {
        let cfg = ModelConfig {
            channels: 8,
            rank: 4,
            ..ModelConfig::default()
        };
        let m = ToyModel::new(cfg, 3).unwrap();
        let img = Tensor::from_fn([1, 5, 6], |i| (i % 7) as f64 / 7.0).unwrap();
        let p = m.predict(&img).unwrap();
        assert_eq!(p.shape(), &[1, 5, 6]);
        assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(m.trainable_count() as u64, cfg.budget().trainable);
        assert_eq!(m.trainable_names().len(), m.trainable().len());
        assert_eq!(m, ToyModel::new(cfg, 3).unwrap());
    }

    #[test]
    fn gradients_reach_only_trainable_tensors() {
        let cfg = ModelConfig {
            channels: 4,
            rank: 2,
            ..ModelConfig::default()
        };
        let m = ToyModel::new(cfg, 1).unwrap();
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape);
        let x = tape.constant(Tensor::from_fn([1, 4, 4], |i| i as f64 / 16.0).unwrap());
        let y = m.forward(&mut tape, &vars, x).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.len(), vars.trainable.len());
        assert!(g.get(vars.stem_w).is_none());
    }
}
