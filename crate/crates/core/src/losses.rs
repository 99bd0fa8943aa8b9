//! Differentiable segmentation objectives: pixel-wise BCE, soft Dice,
//! clDice over a soft morphological skeleton, and their weighted sum.
//!
//! Every loss takes the prediction as a [`Var`] on a caller-owned [`Tape`] and
//! the target as a plain binary [`Tensor`], so gradients flow to the
//! prediction only.

use core::ops::Add;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weights of the four loss terms. The boundary weight exists for
/// configuration compatibility and must stay at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
    pub cl_dice: f64,
    pub boundary: f64,
}

impl LossWeights {
    pub fn new(bce: f64, dice: f64, cl_dice: f64, boundary: f64) -> Result<Self> {
        let w = LossWeights {
            bce,
            dice,
            cl_dice,
            boundary,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for v in [self.bce, self.dice, self.cl_dice, self.boundary] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid("loss weights", "weights must be finite and >= 0"));
            }
        }
        if self.boundary != 0.0 {
            return Err(Error::BoundaryLossUnsupported);
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            bce: 1.0,
            dice: 1.0,
            cl_dice: 0.5,
            boundary: 0.0,
        }
    }
}

impl Add for LossWeights {
    type Output = LossWeights;

    fn add(self, o: LossWeights) -> LossWeights {
        LossWeights {
            bce: self.bce + o.bce,
            dice: self.dice + o.dice,
            cl_dice: self.cl_dice + o.cl_dice,
            boundary: self.boundary + o.boundary,
        }
    }
}

/// Number of erosion rounds in the soft skeleton.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonConfig {
    iterations: usize,
}

impl SkeletonConfig {
    pub fn new(iterations: usize) -> Result<Self> {
        if iterations == 0 {
            return Err(Error::invalid("skeleton", "iterations must be >= 1"));
        }
        Ok(SkeletonConfig { iterations })
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }
}

impl Default for SkeletonConfig {
    fn default() -> Self {
        SkeletonConfig { iterations: 10 }
    }
}

/// Numerical guards: `bce` clamps probabilities to `[bce, 1 - bce]`, `smooth`
/// is added to both sides of every Dice-style ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossEps {
    pub bce: f64,
    pub smooth: f64,
}

impl Default for LossEps {
    fn default() -> Self {
        LossEps {
            bce: 1e-7,
            smooth: 1.0,
        }
    }
}

fn check_pair(op: &'static str, tape: &Tape, pred: Var, target: &Tensor) -> Result<()> {
    let p = tape.value(pred);
    if p.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: p.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_binary(op: &'static str, target: &Tensor) -> Result<()> {
    if target.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(op, "target must be binary (0 or 1)"));
    }
    Ok(())
}

/// Mean binary cross-entropy on probabilities clamped to `[eps, 1 - eps]`.
pub fn bce(tape: &mut Tape, pred: Var, target: &Tensor, eps: f64) -> Result<Var> {
    check_pair("bce", tape, pred, target)?;
    check_binary("bce", target)?;
    if !(eps > 0.0 && eps < 0.5) {
        return Err(Error::invalid("bce", "eps must be in (0, 0.5)"));
    }
    let p = tape.clamp(pred, eps, 1.0 - eps)?;
    let y = tape.constant(target.clone());
    let not_y = tape.constant(target.map(|v| 1.0 - v)?);
    let log_p = tape.ln(p)?;
    let q = tape.rsub_scalar(1.0, p)?;
    let log_q = tape.ln(q)?;
    let pos = tape.mul(y, log_p)?;
    let neg = tape.mul(not_y, log_q)?;
    let ll = tape.add(pos, neg)?;
    let mean = tape.mean(ll)?;
    tape.neg(mean)
}

/// BCE computed from logits as `mean(softplus(z) - z * y)`; agrees with
/// [`bce`] on `sigmoid(z)` away from saturation.
pub fn bce_with_logits(tape: &mut Tape, logits: Var, target: &Tensor) -> Result<Var> {
    check_pair("bce_with_logits", tape, logits, target)?;
    check_binary("bce_with_logits", target)?;
    let y = tape.constant(target.clone());
    let sp = tape.softplus(logits)?;
    let zy = tape.mul(logits, y)?;
    let d = tape.sub(sp, zy)?;
    tape.mean(d)
}

/// `1 - (2 sum(y p) + eps) / (sum(y) + sum(p) + eps)`.
pub fn soft_dice(tape: &mut Tape, pred: Var, target: &Tensor, eps: f64) -> Result<Var> {
    check_pair("soft_dice", tape, pred, target)?;
    if !(eps > 0.0) {
        return Err(Error::invalid("soft_dice", "eps must be > 0"));
    }
    let sum_y = target.data().iter().sum::<f64>();
    let y = tape.constant(target.clone());
    let yp = tape.mul(y, pred)?;
    let inter = tape.sum(yp)?;
    let num = tape.affine(inter, 2.0, eps)?;
    let sum_p = tape.sum(pred)?;
    let den = tape.affine(sum_p, 1.0, sum_y)?;
    let den = tape.affine(den, 1.0, eps)?;
    let ratio = tape.div(num, den)?;
    tape.rsub_scalar(1.0, ratio)
}

fn check_plane(op: &'static str, t: &Tensor) -> Result<()> {
    match t.shape() {
        [1, _, _] | [_, _] => Ok(()),
        s => Err(Error::BadShape {
            op,
            shape: s.to_vec(),
        }),
    }
}

/// Soft skeleton of a `[1, H, W]` (or `[H, W]`) map with values in `[0, 1]`.
///
/// ```text
/// skel = relu(x - open(x))
/// repeat n times:
///     x     = erode(x)
///     delta = relu(x - open(x))
///     skel  = skel + relu(delta - skel * delta)
/// ```
/// with `erode`/`dilate` the 3x3 min/max pools and `open = dilate . erode`.
pub fn soft_skeleton(tape: &mut Tape, x: Var, cfg: &SkeletonConfig) -> Result<Var> {
    check_plane("soft_skeleton", tape.value(x))?;
    let mut eroded = tape.erode(x)?;
    let open = tape.dilate(eroded)?;
    let diff = tape.sub(x, open)?;
    let mut skel = tape.relu(diff)?;
    for _ in 0..cfg.iterations() {
        let img = eroded;
        eroded = tape.erode(img)?;
        let open = tape.dilate(eroded)?;
        let diff = tape.sub(img, open)?;
        let delta = tape.relu(diff)?;
        let overlap = tape.mul(skel, delta)?;
        let fresh = tape.sub(delta, overlap)?;
        let fresh = tape.relu(fresh)?;
        skel = tape.add(skel, fresh)?;
    }
    Ok(skel)
}

/// Soft skeleton of a plain tensor, without gradient tracking.
pub fn soft_skeleton_of(x: &Tensor, cfg: &SkeletonConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let s = soft_skeleton(&mut tape, v, cfg)?;
    Ok(tape.value(s).clone())
}

/// Topology precision and sensitivity on a tape.
pub(crate) fn tprec_tsens(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    cfg: &SkeletonConfig,
    eps: f64,
) -> Result<(Var, Var)> {
    let skel_pred = soft_skeleton(tape, pred, cfg)?;
    let skel_true = soft_skeleton_of(target, cfg)?;
    let sum_skel_true = skel_true.data().iter().sum::<f64>();
    let y = tape.constant(target.clone());
    let st = tape.constant(skel_true);

    let sp_y = tape.mul(skel_pred, y)?;
    let num = tape.sum(sp_y)?;
    let num = tape.affine(num, 1.0, eps)?;
    let den = tape.sum(skel_pred)?;
    let den = tape.affine(den, 1.0, eps)?;
    let tprec = tape.div(num, den)?;

    let st_p = tape.mul(st, pred)?;
    let num = tape.sum(st_p)?;
    let num = tape.affine(num, 1.0, eps)?;
    let den = tape.scalar(sum_skel_true + eps)?;
    let tsens = tape.div(num, den)?;
    Ok((tprec, tsens))
}

/// `1 - 2 Tprec Tsens / (Tprec + Tsens)` where Tprec is the share of the
/// predicted skeleton inside the target and Tsens the share of the target
/// skeleton covered by the prediction.
pub fn cl_dice(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    cfg: &SkeletonConfig,
    eps: f64,
) -> Result<Var> {
    check_pair("cl_dice", tape, pred, target)?;
    check_binary("cl_dice", target)?;
    check_plane("cl_dice", target)?;
    if !(eps > 0.0) {
        return Err(Error::invalid("cl_dice", "eps must be > 0"));
    }
    let (tprec, tsens) = tprec_tsens(tape, pred, target, cfg, eps)?;
    let prod = tape.mul(tprec, tsens)?;
    let num = tape.affine(prod, 2.0, 0.0)?;
    let den = tape.add(tprec, tsens)?;
    let f = tape.div(num, den)?;
    tape.rsub_scalar(1.0, f)
}

/// Weighted loss plus each term's value for logging.
#[derive(Debug, Clone, Copy)]
pub struct CombinedLoss {
    pub total: Var,
    pub bce: f64,
    pub dice: f64,
    pub cl_dice: f64,
}

impl CombinedLoss {
    pub fn total_value(&self, tape: &Tape) -> f64 {
        tape.value(self.total).data()[0]
    }
}

fn weighted(
    tape: &mut Tape,
    w: &LossWeights,
    bce: Var,
    dice: Var,
    cl: Var,
) -> Result<CombinedLoss> {
    let a = tape.affine(bce, w.bce, 0.0)?;
    let b = tape.affine(dice, w.dice, 0.0)?;
    let c = tape.affine(cl, w.cl_dice, 0.0)?;
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(CombinedLoss {
        total,
        bce: tape.item(bce)?,
        dice: tape.item(dice)?,
        cl_dice: tape.item(cl)?,
    })
}

/// `w.bce * BCE + w.dice * Dice + w.cl_dice * clDice` on probabilities.
pub fn combined_loss(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    w: &LossWeights,
    cfg: &SkeletonConfig,
    eps: &LossEps,
) -> Result<CombinedLoss> {
    w.validate()?;
    let b = bce(tape, pred, target, eps.bce)?;
    let d = soft_dice(tape, pred, target, eps.smooth)?;
    let c = cl_dice(tape, pred, target, cfg, eps.smooth)?;
    weighted(tape, w, b, d, c)
}

/// Same as [`combined_loss`] but starting from logits, with the BCE term
/// computed by [`bce_with_logits`]. Returns the probability map as well.
pub fn combined_loss_from_logits(
    tape: &mut Tape,
    logits: Var,
    target: &Tensor,
    w: &LossWeights,
    cfg: &SkeletonConfig,
    eps: &LossEps,
) -> Result<(CombinedLoss, Var)> {
    w.validate()?;
    let prob = tape.sigmoid(logits)?;
    let b = bce_with_logits(tape, logits, target)?;
    let d = soft_dice(tape, prob, target, eps.smooth)?;
    let c = cl_dice(tape, prob, target, cfg, eps.smooth)?;
    Ok((weighted(tape, w, b, d, c)?, prob))
}
