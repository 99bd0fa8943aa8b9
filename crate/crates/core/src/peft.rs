//! Parameter-efficient adaptation layers: LoRA-wrapped linear maps, the
//! residual depthwise-separable spatial adapter, and trainable-parameter
//! accounting.

use alloc::vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Kaiming-uniform matrix `[rows, fan_in]` with bound `sqrt(6 / fan_in)`.
pub fn kaiming_uniform(rows: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if rows == 0 || fan_in == 0 {
        return Err(Error::invalid("kaiming_uniform", "extents must be positive"));
    }
    let bound = math::sqrt(6.0 / fan_in as f64);
    Tensor::from_fn([rows, fan_in], |_| rng.random_range(-bound..=bound))
}

/// Initial LoRA factors: `A [r, d_in]` Kaiming-uniform, `B [d_out, r]` zero.
pub fn lora_init(d_in: usize, d_out: usize, rank: usize, seed: u64) -> Result<(Tensor, Tensor)> {
    if rank == 0 || rank > d_in.min(d_out) {
        return Err(Error::invalid(
            "lora_init",
            alloc::format!("rank {rank} outside 1..={}", d_in.min(d_out)),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = kaiming_uniform(rank, d_in, &mut rng)?;
    let b = Tensor::zeros([d_out, rank])?;
    Ok((a, b))
}

/// A frozen linear layer `W0 x + b0` with a trainable low-rank update
/// `(alpha / r) B A x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    w0: Tensor,
    b0: Tensor,
    a: Tensor,
    b: Tensor,
    alpha: f64,
}

impl LoraLayer {
    /// Wraps a frozen layer, initializing the factors with [`lora_init`].
    pub fn new(w0: Tensor, b0: Tensor, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        let (d_out, d_in) = match *w0.shape() {
            [o, i] => (o, i),
            _ => {
                return Err(Error::BadShape {
                    op: "lora",
                    shape: w0.shape().to_vec(),
                })
            }
        };
        let (a, b) = lora_init(d_in, d_out, rank, seed)?;
        LoraLayer::from_parts(w0, b0, a, b, alpha)
    }

    pub fn from_parts(w0: Tensor, b0: Tensor, a: Tensor, b: Tensor, alpha: f64) -> Result<Self> {
        let bad = |right: &Tensor| Error::ShapeMismatch {
            op: "lora",
            left: w0.shape().to_vec(),
            right: right.shape().to_vec(),
        };
        let (d_out, d_in) = match *w0.shape() {
            [o, i] => (o, i),
            _ => return Err(bad(&w0)),
        };
        if b0.shape() != [d_out] {
            return Err(bad(&b0));
        }
        let r = match *a.shape() {
            [r, i] if i == d_in => r,
            _ => return Err(bad(&a)),
        };
        if b.shape() != [d_out, r] {
            return Err(bad(&b));
        }
        if r > d_in.min(d_out) {
            return Err(Error::invalid("lora", "rank exceeds min(d_in, d_out)"));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::invalid("lora", "alpha must be positive"));
        }
        Ok(LoraLayer {
            w0,
            b0,
            a,
            b,
            alpha,
        })
    }

    pub fn d_in(&self) -> usize {
        self.w0.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.w0.shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `alpha / r`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn w0(&self) -> &Tensor {
        &self.w0
    }

    pub fn b0(&self) -> &Tensor {
        &self.b0
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Tensor {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Tensor {
        &mut self.b
    }

    pub fn factors_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.a, &mut self.b)
    }

    pub fn trainable_params(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// Puts the layer on a tape: `W0`, `b0` as constants, `A`, `B` as
    /// parameters.
    pub fn bind(&self, tape: &mut Tape) -> LoraVars {
        LoraVars {
            w0: tape.constant(self.w0.clone()),
            b0: tape.constant(self.b0.clone()),
            a: tape.param(self.a.clone()),
            b: tape.param(self.b.clone()),
            scale: self.scale(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = lora_forward(&mut tape, &vars, xv)?;
        Ok(tape.value(out).clone())
    }

    /// Output of the frozen layer alone.
    pub fn base_forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let (xm, flat) = as_columns(&mut tape, xv, self.d_in())?;
        let out = base(&mut tape, &vars, xm)?;
        let out = restore(&mut tape, out, flat)?;
        Ok(tape.value(out).clone())
    }
}

/// Tape handles of a bound [`LoraLayer`].
#[derive(Debug, Clone, Copy)]
pub struct LoraVars {
    pub w0: Var,
    pub b0: Var,
    pub a: Var,
    pub b: Var,
    pub scale: f64,
}

fn as_columns(tape: &mut Tape, x: Var, d_in: usize) -> Result<(Var, bool)> {
    match *tape.value(x).shape() {
        [d] if d == d_in => Ok((tape.reshape(x, [d, 1])?, true)),
        [d, _] if d == d_in => Ok((x, false)),
        ref s => Err(Error::ShapeMismatch {
            op: "lora_forward",
            left: vec![d_in],
            right: s.to_vec(),
        }),
    }
}

fn restore(tape: &mut Tape, out: Var, flat: bool) -> Result<Var> {
    if flat {
        let d = tape.value(out).shape()[0];
        tape.reshape(out, [d])
    } else {
        Ok(out)
    }
}

fn base(tape: &mut Tape, l: &LoraVars, x: Var) -> Result<Var> {
    let wx = tape.matmul(l.w0, x)?;
    tape.add_row_bias(wx, l.b0)
}

/// `W0 x + b0 + (alpha / r) B (A x)` for `x` of shape `[d_in]` or
/// `[d_in, n]` (one column per sample).
pub fn lora_forward(tape: &mut Tape, l: &LoraVars, x: Var) -> Result<Var> {
    let d_in = tape.value(l.w0).shape()[1];
    let (xm, flat) = as_columns(tape, x, d_in)?;
    let h = base(tape, l, xm)?;
    let ax = tape.matmul(l.a, xm)?;
    let bax = tape.matmul(l.b, ax)?;
    let delta = tape.affine(bax, l.scale, 0.0)?;
    let out = tape.add(h, delta)?;
    restore(tape, out, flat)
}

/// Weights of `z + pw(relu(dw(z)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub dw_w: Tensor,
    pub dw_b: Tensor,
    pub pw_w: Tensor,
    pub pw_b: Tensor,
}

impl AdapterParams {
    pub fn new(dw_w: Tensor, dw_b: Tensor, pw_w: Tensor, pw_b: Tensor) -> Result<Self> {
        let c = dw_b.numel();
        if dw_w.shape() != [c, 3, 3]
            || dw_b.shape() != [c]
            || pw_w.shape() != [c, c]
            || pw_b.shape() != [c]
        {
            return Err(Error::ShapeMismatch {
                op: "adapter",
                left: dw_w.shape().to_vec(),
                right: pw_w.shape().to_vec(),
            });
        }
        Ok(AdapterParams {
            dw_w,
            dw_b,
            pw_w,
            pw_b,
        })
    }

    /// All-zero adapter: the identity map.
    pub fn zeros(channels: usize) -> Result<Self> {
        AdapterParams::new(
            Tensor::zeros([channels, 3, 3])?,
            Tensor::zeros([channels])?,
            Tensor::zeros([channels, channels])?,
            Tensor::zeros([channels])?,
        )
    }

    /// Kaiming-uniform depthwise kernels, zero projection and biases, so the
    /// adapter starts as the identity but receives gradient immediately.
    pub fn init(channels: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dw = kaiming_uniform(channels, 9, &mut rng)?.reshape([channels, 3, 3])?;
        AdapterParams::new(
            dw,
            Tensor::zeros([channels])?,
            Tensor::zeros([channels, channels])?,
            Tensor::zeros([channels])?,
        )
    }

    pub fn channels(&self) -> usize {
        self.dw_b.numel()
    }

    pub fn param_count(&self) -> usize {
        adapter_param_count(self.channels() as u64) as usize
    }

    pub fn bind(&self, tape: &mut Tape) -> AdapterVars {
        AdapterVars {
            dw_w: tape.param(self.dw_w.clone()),
            dw_b: tape.param(self.dw_b.clone()),
            pw_w: tape.param(self.pw_w.clone()),
            pw_b: tape.param(self.pw_b.clone()),
        }
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let zv = tape.constant(z.clone());
        let out = adapter_forward(&mut tape, &vars, zv)?;
        Ok(tape.value(out).clone())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub dw_w: Var,
    pub dw_b: Var,
    pub pw_w: Var,
    pub pw_b: Var,
}

/// `z + Conv1x1(ReLU(DepthwiseConv3x3(z)))`.
pub fn adapter_forward(tape: &mut Tape, p: &AdapterVars, z: Var) -> Result<Var> {
    let dw = tape.conv_dw3x3(z, p.dw_w, p.dw_b)?;
    let act = tape.relu(dw)?;
    let pw = tape.conv_pw1x1(act, p.pw_w, p.pw_b)?;
    tape.add(z, pw)
}

/// `9C + C + C^2 + C`: depthwise kernels and bias, pointwise matrix and bias.
pub fn adapter_param_count(channels: u64) -> u64 {
    9 * channels + channels + channels * channels + channels
}

/// Shape of a LoRA-adapted backbone for parameter accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamConfig {
    pub d_in: u64,
    pub d_out: u64,
    pub rank: u64,
    pub n_blocks: u64,
    pub layers_per_block: u64,
    /// Adapter channel count; 0 means no adapter.
    pub channels: u64,
    pub head_params: u64,
    /// Parameters that stay frozen (backbone weights).
    pub frozen_params: u64,
}

impl ParamConfig {
    /// LoRA on the two FFN projections (768 <-> 3072) of each of the 12
    /// ViT-B blocks, with a 256-channel adapter. Head and frozen counts are
    /// left at zero for the caller to fill in.
    pub fn vit_b_ffn(rank: u64) -> Self {
        ParamConfig {
            d_in: 768,
            d_out: 3072,
            rank,
            n_blocks: 12,
            layers_per_block: 2,
            channels: 256,
            head_params: 0,
            frozen_params: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBudget {
    pub lora: u64,
    pub adapter: u64,
    pub head: u64,
    pub trainable: u64,
    pub total: u64,
}

impl ParamBudget {
    /// Budget from component counts and the full model size.
    pub fn from_parts(lora: u64, adapter: u64, head: u64, total: u64) -> Result<Self> {
        let trainable = lora + adapter + head;
        if total == 0 || total < trainable {
            return Err(Error::invalid(
                "param budget",
                "total must be positive and cover the trainable parts",
            ));
        }
        Ok(ParamBudget {
            lora,
            adapter,
            head,
            trainable,
            total,
        })
    }

    pub fn fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

/// Exact trainable-parameter counts for a configuration. Each adapted
/// layer contributes `r (d_in + d_out)`.
pub fn count_params(cfg: &ParamConfig) -> ParamBudget {
    let lora = cfg.n_blocks * cfg.layers_per_block * cfg.rank * (cfg.d_in + cfg.d_out);
    let adapter = if cfg.channels == 0 {
        0
    } else {
        adapter_param_count(cfg.channels)
    };
    let trainable = lora + adapter + cfg.head_params;
    ParamBudget {
        lora,
        adapter,
        head: cfg.head_params,
        trainable,
        total: trainable + cfg.frozen_params,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn init_contract() {
        let (a, b) = lora_init(768, 64, 16, 7).unwrap();
        assert!(b.data().iter().all(|&v| v == 0.0));
        assert_eq!(b.shape(), &[64, 16]);
        let bound = libm::sqrt(6.0 / 768.0);
        assert!(a.data().iter().all(|v| v.abs() <= bound));
        assert!(bound < 0.0884 && bound > 0.0883);
        let (a2, _) = lora_init(768, 64, 16, 7).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&a2));
        assert!(lora_init(4, 8, 5, 0).is_err());
        assert!(lora_init(4, 8, 0, 0).is_err());
    }

    #[test]
    fn lora_scalar_example() {
        let layer = LoraLayer::from_parts(
            t(&[1, 1], &[2.0]),
            t(&[1], &[0.0]),
            t(&[1, 1], &[3.0]),
            t(&[1, 1], &[4.0]),
            2.0,
        )
        .unwrap();
        assert_eq!(layer.forward(&t(&[1], &[1.0])).unwrap().data(), &[26.0]);
    }

    #[test]
    fn fresh_layer_matches_base() {
        let w0 = Tensor::from_fn([3, 5], |i| (i as f64 * 0.3).sin()).unwrap();
        let b0 = t(&[3], &[0.1, -0.2, 0.3]);
        let layer = LoraLayer::new(w0, b0, 2, 2.0, 11).unwrap();
        let x = Tensor::from_fn([5], |i| i as f64 - 2.0).unwrap();
        assert_eq!(layer.forward(&x).unwrap(), layer.base_forward(&x).unwrap());
        let xs = Tensor::from_fn([5, 4], |i| (i as f64).cos()).unwrap();
        assert_eq!(layer.forward(&xs).unwrap(), layer.base_forward(&xs).unwrap());
        assert!(layer.forward(&t(&[4], &[0.0; 4])).is_err());
    }

    #[test]
    fn frozen_weights_get_no_gradient() {
        let layer = LoraLayer::from_parts(
            Tensor::from_fn([2, 3], |i| i as f64 * 0.1).unwrap(),
            t(&[2], &[0.5, -0.5]),
            Tensor::from_fn([1, 3], |i| 0.2 - i as f64 * 0.1).unwrap(),
            t(&[2, 1], &[0.3, -0.7]),
            1.0,
        )
        .unwrap();
        let mut tape = Tape::new();
        let v = layer.bind(&mut tape);
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let out = lora_forward(&mut tape, &v, x).unwrap();
        let l = tape.sum(out).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(v.w0).is_none() && g.get(v.b0).is_none());
        assert!(g.get(v.a).is_some() && g.get(v.b).is_some());
    }

    #[test]
    fn adapter_examples() {
        let z = Tensor::from_fn([3, 4, 4], |i| (i as f64 * 0.7).sin()).unwrap();
        assert_eq!(AdapterParams::zeros(3).unwrap().forward(&z).unwrap(), z);

        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let p = AdapterParams::new(t(&[1, 3, 3], &k), t(&[1], &[0.0]), t(&[1, 1], &[1.0]), t(&[1], &[0.0]))
            .unwrap();
        let z = Tensor::from_fn([1, 3, 3], |i| i as f64 * 0.5).unwrap();
        let out = p.forward(&z).unwrap();
        assert_eq!(out, z.map(|v| 2.0 * v).unwrap());

        let wrong = Tensor::zeros([2, 3, 3]).unwrap();
        assert!(p.forward(&wrong).is_err());
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(adapter_param_count(256), 68_352);
        let vit = count_params(&ParamConfig::vit_b_ffn(16));
        assert_eq!(vit.lora, 1_474_560);
        assert_eq!(vit.adapter, 68_352);
        let none = count_params(&ParamConfig {
            n_blocks: 0,
            ..ParamConfig::vit_b_ffn(16)
        });
        assert_eq!(none.lora, 0);

        let table = ParamBudget::from_parts(2_400_000, 66_000, 2_400_000, 93_700_000).unwrap();
        assert_eq!(table.trainable, 4_866_000);
        assert!((table.fraction() * 100.0 - 5.2).abs() < 0.1);
        assert!(ParamBudget::from_parts(5, 5, 5, 10).is_err());
    }
}
