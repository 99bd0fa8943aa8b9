//! Finite-difference verification of the tape's analytic gradients.
//!
//! Each named check draws random inputs, reduces the op output to a scalar
//! through a random projection, and compares every coordinate of the
//! analytic gradient against a central difference. A coordinate whose
//! central differences at `h` and `2h` disagree sits next to a kink
//! (relu, clamp, min/max selection); such draws are discarded and redrawn.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{self, SkeletonConfig};
use crate::peft::{self, AdapterVars, LoraVars};
use crate::tensor::Tensor;

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid("finite_diff_grad", "step must be positive"));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        out.push(central(&mut f, &mut probe, x.data()[i], i, h)?);
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn central(
    f: &mut impl FnMut(&Tensor) -> Result<f64>,
    probe: &mut Tensor,
    x0: f64,
    i: usize,
    h: f64,
) -> Result<f64> {
    probe.data_mut()[i] = x0 + h;
    let plus = f(probe)?;
    probe.data_mut()[i] = x0 - h;
    let minus = f(probe)?;
    probe.data_mut()[i] = x0;
    if !(plus.is_finite() && minus.is_finite()) {
        return Err(Error::NonFinite {
            op: "finite_diff_grad",
        });
    }
    Ok((plus - minus) / (2.0 * h))
}

/// Relative error with an absolute floor, so coordinates whose true
/// gradient is zero are judged on absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

const REL_FLOOR: f64 = 1e-4;
// Central differences at h and 2h agree to O(h^2) for smooth functions.
const KINK_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckSettings {
    pub trials: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        CheckSettings {
            trials: 100,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

/// The input draw that produced an op's largest error.
#[derive(Debug, Clone, Serialize)]
pub struct WorstCase {
    pub trial: usize,
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub inputs: Vec<(String, Tensor)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OpCheck {
    pub op: &'static str,
    pub trials: usize,
    /// Draws discarded for sitting next to a kink.
    pub redrawn: usize,
    pub max_rel_error: f64,
    pub passed: bool,
    pub worst: Option<WorstCase>,
}

/// Names of every check, in run order.
pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "relu",
    "sigmoid",
    "softplus",
    "ln",
    "clamp",
    "matmul",
    "add_row_bias",
    "min_pool",
    "max_pool",
    "conv_dw3x3",
    "conv_pw1x1",
    "sum",
    "mean",
    "soft_skeleton",
    "bce",
    "bce_logits",
    "dice",
    "cl_dice",
    "lora",
    "adapter",
];

struct Input {
    name: &'static str,
    value: Tensor,
    differentiable: bool,
}

fn input(name: &'static str, value: Tensor) -> Input {
    Input {
        name,
        value,
        differentiable: true,
    }
}

fn fixed(name: &'static str, value: Tensor) -> Input {
    Input {
        name,
        value,
        differentiable: false,
    }
}

type Build = fn(&mut Tape, &[Var], &[Tensor]) -> Result<Var>;

struct Case {
    inputs: Vec<Input>,
    build: Build,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi)).expect("finite draw")
}

// Values in +-[lo, hi] whose magnitudes are at least `gap` from `kink`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v = rng.random_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() > 1e-3) {
            break v;
        }
    })
    .expect("finite draw")
}

// Distinct values spaced well apart, shuffled, none near the zero padding.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n)
        .map(|i| {
            let mag = 0.05 + 0.95 * (i as f64 + 0.5) / n as f64;
            if i % 2 == 0 {
                mag
            } else {
                -mag
            }
        })
        .collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals).expect("finite draw")
}

fn binary(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
        .expect("finite draw")
}

fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let r = tape.constant(weights.clone());
    let p = tape.mul(out, r)?;
    tape.sum(p)
}

// Projects the op output with the last fixed input.
macro_rules! projected {
    ($body:expr) => {{
        fn build(t: &mut Tape, v: &[Var], c: &[Tensor]) -> Result<Var> {
            let f: fn(&mut Tape, &[Var], &[Tensor]) -> Result<Var> = $body;
            let out = f(t, v, c)?;
            project(t, out, c.last().expect("projection weights"))
        }
        build as Build
    }};
}

fn make_case(op: &str, rng: &mut ChaCha8Rng) -> Option<Case> {
    let s34 = [3usize, 4];
    let case = match op {
        "add" | "sub" | "mul" => {
            let build: Build = match op {
                "add" => projected!(|t, v, _| t.add(v[0], v[1])),
                "sub" => projected!(|t, v, _| t.sub(v[0], v[1])),
                _ => projected!(|t, v, _| t.mul(v[0], v[1])),
            };
            Case {
                inputs: vec![
                    input("a", uniform(rng, &s34, -2.0, 2.0)),
                    input("b", uniform(rng, &s34, -2.0, 2.0)),
                    fixed("proj", uniform(rng, &s34, -1.0, 1.0)),
                ],
                build,
            }
        }
        "div" => Case {
            inputs: vec![
                input("a", uniform(rng, &s34, -2.0, 2.0)),
                input("b", away_from(rng, &s34, 0.5, 2.0, &[])),
                fixed("proj", uniform(rng, &s34, -1.0, 1.0)),
            ],
            build: projected!(|t, v, _| t.div(v[0], v[1])),
        },
        "relu" => Case {
            inputs: vec![
                input("x", away_from(rng, &s34, -2.0, 2.0, &[0.0])),
                fixed("proj", uniform(rng, &s34, -1.0, 1.0)),
            ],
            build: projected!(|t, v, _| t.relu(v[0])),
        },
        "sigmoid" => Case {
            inputs: vec![
                input("x", uniform(rng, &s34, -4.0, 4.0)),
                fixed("proj", uniform(rng, &s34, -1.0, 1.0)),
            ],
            build: projected!(|t, v, _| t.sigmoid(v[0])),
        },
        "softplus" => Case {
            inputs: vec![
                input("x", uniform(rng, &s34, -4.0, 4.0)),
                fixed("proj", uniform(rng, &s34, -1.0, 1.0)),
            ],
            build: projected!(|t, v, _| t.softplus(v[0])),
        },
        "ln" => Case {
            inputs: vec![
                input("x", uniform(rng, &s34, 0.1, 3.0)),
                fixed("proj", uniform(rng, &s34, -1.0, 1.0)),
            ],
            build: projected!(|t, v, _| t.ln(v[0])),
        },
        "clamp" => Case {
            inputs: vec![
                input("x", away_from(rng, &s34, -2.0, 2.0, &[-1.0, 1.0])),
                fixed("proj", uniform(rng, &s34, -1.0, 1.0)),
            ],
            build: projected!(|t, v, _| t.clamp(v[0], -1.0, 1.0)),
        },
        "matmul" => Case {
            inputs: vec![
                input("a", uniform(rng, &[3, 4], -1.0, 1.0)),
                input("b", uniform(rng, &[4, 2], -1.0, 1.0)),
                fixed("proj", uniform(rng, &[3, 2], -1.0, 1.0)),
            ],
            build: projected!(|t, v, _| t.matmul(v[0], v[1])),
        },
        "add_row_bias" => Case {
            inputs: vec![
                input("x", uniform(rng, &s34, -1.0, 1.0)),
                input("b", uniform(rng, &[3], -1.0, 1.0)),
                fixed("proj", uniform(rng, &s34, -1.0, 1.0)),
            ],
            build: projected!(|t, v, _| t.add_row_bias(v[0], v[1])),
        },
        "min_pool" | "max_pool" => Case {
            inputs: vec![
                input("x", distinct(rng, &[2, 4, 5])),
                fixed("proj", uniform(rng, &[2, 4, 5], -1.0, 1.0)),
            ],
            build: if op == "min_pool" {
                projected!(|t, v, _| t.erode(v[0]))
            } else {
                projected!(|t, v, _| t.dilate(v[0]))
            },
        },
        "conv_dw3x3" => Case {
            inputs: vec![
                input("x", uniform(rng, &[2, 5, 5], -1.0, 1.0)),
                input("w", uniform(rng, &[2, 3, 3], -1.0, 1.0)),
                input("b", uniform(rng, &[2], -1.0, 1.0)),
                fixed("proj", uniform(rng, &[2, 5, 5], -1.0, 1.0)),
            ],
            build: projected!(|t, v, _| t.conv_dw3x3(v[0], v[1], v[2])),
        },
        "conv_pw1x1" => Case {
            inputs: vec![
                input("x", uniform(rng, &[3, 4, 4], -1.0, 1.0)),
                input("w", uniform(rng, &[2, 3], -1.0, 1.0)),
                input("b", uniform(rng, &[2], -1.0, 1.0)),
                fixed("proj", uniform(rng, &[2, 4, 4], -1.0, 1.0)),
            ],
            build: projected!(|t, v, _| t.conv_pw1x1(v[0], v[1], v[2])),
        },
        "sum" => Case {
            inputs: vec![input("x", uniform(rng, &s34, -1.0, 1.0))],
            build: |t, v, _| t.sum(v[0]),
        },
        "mean" => Case {
            inputs: vec![input("x", uniform(rng, &s34, -1.0, 1.0))],
            build: |t, v, _| t.mean(v[0]),
        },
        "soft_skeleton" => Case {
            inputs: vec![
                input("x", uniform(rng, &[1, 7, 7], 0.05, 0.95)),
                fixed("proj", uniform(rng, &[1, 7, 7], -1.0, 1.0)),
            ],
            build: projected!(|t, v, _| losses::soft_skeleton(t, v[0], &SkeletonConfig::default())),
        },
        "bce" => Case {
            inputs: vec![
                input("pred", uniform(rng, &[1, 6, 6], 0.05, 0.95)),
                fixed("target", binary(rng, &[1, 6, 6])),
            ],
            build: |t, v, c| losses::bce(t, v[0], &c[0], 1e-7),
        },
        "bce_logits" => Case {
            inputs: vec![
                input("logits", uniform(rng, &[1, 6, 6], -3.0, 3.0)),
                fixed("target", binary(rng, &[1, 6, 6])),
            ],
            build: |t, v, c| losses::bce_with_logits(t, v[0], &c[0]),
        },
        "dice" => Case {
            inputs: vec![
                input("pred", uniform(rng, &[1, 6, 6], 0.05, 0.95)),
                fixed("target", binary(rng, &[1, 6, 6])),
            ],
            build: |t, v, c| losses::soft_dice(t, v[0], &c[0], 1.0),
        },
        "cl_dice" => Case {
            inputs: vec![
                input("pred", uniform(rng, &[1, 8, 8], 0.05, 0.95)),
                fixed("target", binary(rng, &[1, 8, 8])),
            ],
            build: |t, v, c| losses::cl_dice(t, v[0], &c[0], &SkeletonConfig::default(), 1.0),
        },
        "lora" => Case {
            inputs: vec![
                input("x", uniform(rng, &[4, 3], -1.0, 1.0)),
                input("a", uniform(rng, &[2, 4], -1.0, 1.0)),
                input("b", uniform(rng, &[3, 2], -1.0, 1.0)),
                fixed("w0", uniform(rng, &[3, 4], -1.0, 1.0)),
                fixed("b0", uniform(rng, &[3], -1.0, 1.0)),
                fixed("proj", uniform(rng, &[3, 3], -1.0, 1.0)),
            ],
            build: projected!(|t, v, c| {
                let w0 = t.constant(c[0].clone());
                let b0 = t.constant(c[1].clone());
                let vars = LoraVars {
                    w0,
                    b0,
                    a: v[1],
                    b: v[2],
                    scale: 1.5,
                };
                peft::lora_forward(t, &vars, v[0])
            }),
        },
        "adapter" => Case {
            inputs: vec![
                input("z", uniform(rng, &[2, 5, 5], -1.0, 1.0)),
                input("dw_w", uniform(rng, &[2, 3, 3], -1.0, 1.0)),
                input("dw_b", uniform(rng, &[2], -0.5, 0.5)),
                input("pw_w", uniform(rng, &[2, 2], -1.0, 1.0)),
                input("pw_b", uniform(rng, &[2], -0.5, 0.5)),
                fixed("proj", uniform(rng, &[2, 5, 5], -1.0, 1.0)),
            ],
            build: projected!(|t, v, _| {
                let p = AdapterVars {
                    dw_w: v[1],
                    dw_b: v[2],
                    pw_w: v[3],
                    pw_b: v[4],
                };
                peft::adapter_forward(t, &p, v[0])
            }),
        },
        _ => return None,
    };
    Some(case)
}

impl Case {
    fn eval(&self, values: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let mut vars = Vec::new();
        let mut consts = Vec::new();
        for (inp, v) in self.inputs.iter().zip(values) {
            if inp.differentiable {
                vars.push(tape.param(v.clone()));
            } else {
                consts.push(v.clone());
            }
        }
        let loss = (self.build)(&mut tape, &vars, &consts)?;
        Ok((tape, vars, loss))
    }

    fn value_with(&self, values: &mut [Tensor], slot: usize, probe: &Tensor) -> Result<f64> {
        let saved = core::mem::replace(&mut values[slot], probe.clone());
        let r = self.eval(values).and_then(|(t, _, l)| t.item(l));
        values[slot] = saved;
        r
    }
}

struct TrialOutcome {
    kink: bool,
    max_err: f64,
    worst: Option<(String, usize, f64, f64)>,
}

fn run_trial(case: &Case, h: f64) -> Result<TrialOutcome> {
    let mut values: Vec<Tensor> = case.inputs.iter().map(|i| i.value.clone()).collect();
    let (tape, vars, loss) = case.eval(&values)?;
    let grads = tape.backward(loss)?;
    let mut outcome = TrialOutcome {
        kink: false,
        max_err: 0.0,
        worst: None,
    };
    let mut var_idx = 0;
    for slot in 0..case.inputs.len() {
        if !case.inputs[slot].differentiable {
            continue;
        }
        let var = vars[var_idx];
        var_idx += 1;
        let analytic = grads
            .get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(values[slot].shape().to_vec()).expect("shape"));
        let x = values[slot].clone();
        let mut probe = x.clone();
        for i in 0..x.numel() {
            let mut f = |p: &Tensor| case.value_with(&mut values, slot, p);
            let d1 = central(&mut f, &mut probe, x.data()[i], i, h)?;
            let d2 = central(&mut f, &mut probe, x.data()[i], i, 2.0 * h)?;
            if (d1 - d2).abs() > KINK_TOL * d1.abs().max(d2.abs()).max(REL_FLOOR) {
                outcome.kink = true;
                return Ok(outcome);
            }
            let a = analytic.data()[i];
            let err = relative_error(a, d1);
            if err > outcome.max_err || outcome.worst.is_none() {
                outcome.max_err = outcome.max_err.max(err);
                outcome.worst = Some((String::from(case.inputs[slot].name), i, a, d1));
            }
        }
    }
    Ok(outcome)
}

/// Runs one named check. Unknown names are an error.
pub fn check_op(op: &str, settings: &CheckSettings) -> Result<OpCheck> {
    let name = OPS
        .iter()
        .copied()
        .find(|o| *o == op)
        .ok_or_else(|| Error::invalid("gradcheck", alloc::format!("unknown op {op:?}")))?;
    // Each op gets its own stream so filtering does not change the draws.
    let op_index = OPS.iter().position(|o| *o == op).unwrap_or(0) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ (op_index.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    let mut report = OpCheck {
        op: name,
        trials: 0,
        redrawn: 0,
        max_rel_error: 0.0,
        passed: true,
        worst: None,
    };
    let max_draws = settings.trials * 20 + 20;
    let mut draws = 0;
    while report.trials < settings.trials {
        draws += 1;
        if draws > max_draws {
            return Err(Error::invalid(
                "gradcheck",
                alloc::format!("{op}: too many draws near kinks"),
            ));
        }
        let case = make_case(op, &mut rng).expect("known op");
        let outcome = run_trial(&case, settings.step)?;
        if outcome.kink {
            report.redrawn += 1;
            continue;
        }
        let trial = report.trials;
        report.trials += 1;
        if outcome.max_err >= report.max_rel_error {
            report.max_rel_error = outcome.max_err;
            if let Some((input, index, analytic, numeric)) = outcome.worst {
                report.worst = Some(WorstCase {
                    trial,
                    input,
                    index,
                    analytic,
                    numeric,
                    inputs: case
                        .inputs
                        .iter()
                        .map(|i| (String::from(i.name), i.value.clone()))
                        .collect(),
                });
            }
        }
    }
    report.passed = report.max_rel_error < settings.tolerance;
    Ok(report)
}

/// Runs the named checks (all of [`OPS`] when `filter` is empty).
pub fn check_ops(filter: &[&str], settings: &CheckSettings) -> Result<Vec<OpCheck>> {
    let names: Vec<&str> = if filter.is_empty() {
        OPS.to_vec()
    } else {
        filter.to_vec()
    };
    names.iter().map(|op| check_op(op, settings)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_examples() {
        let x = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().sum()), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }

        let x = Tensor::new([1], vec![3.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);

        let x = Tensor::new([1], vec![5.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data()[0].max(0.0)), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn finite_diff_rejects_bad_input() {
        let x = Tensor::new([1], vec![1.0]).unwrap();
        assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
        assert!(finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-5).is_err());
    }

    #[test]
    fn every_op_has_a_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for op in OPS {
            assert!(make_case(op, &mut rng).is_some(), "{op}");
        }
        assert!(check_op("nope", &CheckSettings::default()).is_err());
    }

    #[test]
    fn quick_check_all_ops() {
        let settings = CheckSettings {
            trials: 5,
            ..CheckSettings::default()
        };
        for r in check_ops(&[], &settings).unwrap() {
            assert!(r.passed, "{} max rel err {}", r.op, r.max_rel_error);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // The square term bypasses the tape, so the analytic gradient misses it.
        let case = Case {
            inputs: vec![input("x", Tensor::new([1], vec![0.7]).unwrap())],
            build: |t, v, _| {
                let x = t.value(v[0]).data()[0];
                let hidden = t.scalar(x * x)?;
                let s = t.sum(v[0])?;
                t.add(s, hidden)
            },
        };
        let out = run_trial(&case, 1e-5).unwrap();
        assert!(!out.kink);
        assert!(out.max_err > 0.5, "{}", out.max_err);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-5).abs() < 1e-15);
    }
}
