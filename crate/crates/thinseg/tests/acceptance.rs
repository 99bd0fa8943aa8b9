//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tempfile::tempdir;
use thinseg::checkpoint::Checkpoint;
use thinseg_core::gradcheck::OPS;
use thinseg_core::losses::{bce, cl_dice, combined_loss, soft_dice, LossEps, LossWeights, SkeletonConfig};
use thinseg_core::metrics::{bf_score, distance_transform, ece, region_metrics, Mask};
use thinseg_core::peft::{adapter_param_count, count_params, AdapterParams, LoraLayer, ParamBudget};
use thinseg_core::train::TrainConfig;
use thinseg_core::{Tape, Tensor};

type Outcome = Result<String, String>;

fn thinseg(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_thinseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn gradient_correctness() -> Outcome {
    let dir = tempdir().map_err(|e| e.to_string())?;
    let dump = dir.path().join("fail.json");
    let start = Instant::now();
    let o = thinseg(&["gradcheck", "--trials", "100", "--tolerance", "1e-4", "--dump", s(&dump)]);
    let took = start.elapsed();
    let out = String::from_utf8_lossy(&o.stdout).into_owned();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for line in out.lines() {
        let trials: usize = field(line, "trials=").parse().map_err(|_| format!("bad line {line:?}"))?;
        ensure(trials >= 100, format!("{line}: fewer than 100 trials"))?;
        let err: f64 = field(line, "max_rel_err=").parse().map_err(|_| format!("bad line {line:?}"))?;
        worst = worst.max(err);
        checked += 1;
    }
    ensure(o.status.success(), format!("exit {:?}: {out}", o.status.code()))?;
    ensure(checked == OPS.len(), format!("{checked} of {} ops reported", OPS.len()))?;
    ensure(worst < 1e-4, format!("max relative error {worst:e}"))?;
    ensure(took < Duration::from_secs(60), format!("took {}", secs(took)))?;
    Ok(format!("{checked} ops x 100 trials, max rel err {worst:.2e}, {}", secs(took)))
}

fn field<'a>(line: &'a str, key: &str) -> &'a str {
    line.split_whitespace()
        .find_map(|w| w.strip_prefix(key))
        .unwrap_or("")
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-3.0..3.0)).unwrap()
}

fn lora_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..100 {
        let d_in = rng.random_range(1..48);
        let d_out = rng.random_range(1..48);
        let rank = rng.random_range(1..=d_in.min(d_out));
        let n = rng.random_range(1..6);
        let w0 = random_tensor(&mut rng, &[d_out, d_in]);
        let b0 = random_tensor(&mut rng, &[d_out]);
        let x = random_tensor(&mut rng, &[d_in, n]);
        let alpha = rng.random_range(0.5..32.0);
        let layer = LoraLayer::new(w0, b0, rank, alpha, rng.random()).map_err(|e| e.to_string())?;
        let out = layer.forward(&x).map_err(|e| e.to_string())?;
        let base = layer.base_forward(&x).map_err(|e| e.to_string())?;
        let same = out.shape() == base.shape()
            && out.data().iter().zip(base.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, format!("layer {i} ({d_out}x{d_in}, r={rank}) differs from its base"))?;
    }
    Ok("100 random layers bit-identical to W0 x + b0".into())
}

fn adapter_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let c = rng.random_range(1..17);
        let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
        let z = random_tensor(&mut rng, &[c, h, w]);
        let out = AdapterParams::zeros(c).and_then(|a| a.forward(&z)).map_err(|e| e.to_string())?;
        ensure(out == z, format!("zero adapter changed a {c}x{h}x{w} input"))?;
    }
    Ok("50 random inputs returned unchanged".into())
}

fn param_accounting() -> Outcome {
    let adapter = adapter_param_count(256);
    ensure(adapter == 68_352, format!("adapter count {adapter}"))?;
    let vit = count_params(&thinseg_core::peft::ParamConfig::vit_b_ffn(16));
    ensure(vit.adapter == 68_352, "preset adapter count")?;
    let stated = ParamBudget::from_parts(2_400_000, 66_000, 2_400_000, 93_700_000).map_err(|e| e.to_string())?;
    let pct = 100.0 * stated.fraction();
    ensure((pct - 5.2).abs() <= 0.1, format!("fraction {pct:.3}%"))?;
    Ok(format!("adapter 68352, stated sizes give {pct:.2}% (ViT-B FFN LoRA exact count {})", vit.lora))
}

fn loss_weight_defaults() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let w = LossWeights::default();
    ensure(
        (w.bce, w.dice, w.cl_dice, w.boundary) == (1.0, 1.0, 0.5, 0.0),
        format!("defaults {w:?}"),
    )?;
    let cfg = SkeletonConfig::default();
    let eps = LossEps::default();
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (h, wd) = (rng.random_range(4..24), rng.random_range(4..24));
        let pred = Tensor::from_fn([1, h, wd], |_| rng.random_range(0.0..=1.0)).unwrap();
        let target = Tensor::from_fn([1, h, wd], |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(pred.clone());
        let total = combined_loss(&mut tape, p, &target, &w, &cfg, &eps).map_err(|e| e.to_string())?;
        let total = total.total_value(&tape);
        let mut solo = Tape::new();
        let p = solo.constant(pred);
        let b = bce(&mut solo, p, &target, eps.bce).and_then(|v| solo.item(v));
        let d = soft_dice(&mut solo, p, &target, eps.smooth).and_then(|v| solo.item(v));
        let c = cl_dice(&mut solo, p, &target, &cfg, eps.smooth).and_then(|v| solo.item(v));
        let (b, d, c) = (b.map_err(|e| e.to_string())?, d.map_err(|e| e.to_string())?, c.map_err(|e| e.to_string())?);
        let expected = 1.0 * b + 1.0 * d + 0.5 * c;
        worst = worst.max((total - expected).abs() / expected.abs());
    }
    ensure(worst <= 1e-12, format!("relative gap {worst:e}"))?;
    Ok(format!("50 random pairs, max relative gap {worst:.1e}"))
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let density = rng.random_range(0.02..0.98);
    Mask::from_fn(h, w, |_, _| rng.random_bool(density))
}

fn brute_force(m: &Mask) -> Vec<f64> {
    let mut out = Vec::new();
    for y in 0..m.height() {
        for x in 0..m.width() {
            let mut best = f64::INFINITY;
            for fy in 0..m.height() {
                for fx in 0..m.width() {
                    if m.get(fy, fx) {
                        let (dy, dx) = (y.abs_diff(fy) as f64, x.abs_diff(fx) as f64);
                        best = best.min((dy * dy + dx * dx).sqrt());
                    }
                }
            }
            out.push(best);
        }
    }
    out
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for i in 0..600 {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let m = random_mask(&mut rng, h, w);
        ensure(distance_transform(&m).data() == &brute_force(&m)[..], format!("distance transform mask {i}"))?;
    }
    for i in 0..150 {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let (p, g) = (random_mask(&mut rng, h, w), random_mask(&mut rng, h, w));
        let r = region_metrics(&p, &g).map_err(|e| e.to_string())?;
        ensure((r.iou - r.dice / (2.0 - r.dice)).abs() <= 1e-12, format!("iou/dice pair {i}"))?;
        let tol = rng.random_range(0.5..4.0);
        let (a, b) = (bf_score(&p, &g, tol), bf_score(&g, &p, tol));
        ensure(a.is_ok() && a.as_ref().ok() == b.as_ref().ok(), format!("bf symmetry pair {i}"))?;
        if !p.is_empty() {
            ensure(bf_score(&p, &p, tol).ok() == Some(1.0), format!("bf self pair {i}"))?;
        }
    }
    Ok("600 distance transforms exact, 150 pairs for IoU/Dice and BF".into())
}

fn calibration_sanity() -> Outcome {
    let gt = Mask::from_fn(20, 10, |y, _| y < 14);
    let perfect = ece(&gt.to_tensor(), &gt, 10).map_err(|e| e.to_string())?;
    let uniform = ece(&Tensor::full([20, 10], 0.7).unwrap(), &gt, 10).map_err(|e| e.to_string())?;
    ensure(perfect.abs() <= 1e-9, format!("perfect predictor ECE {perfect}"))?;
    ensure(uniform.abs() <= 1e-9, format!("uniform 0.7 ECE {uniform}"))?;
    Ok(format!("perfect {perfect:.1e}, uniform-0.7 {uniform:.1e}"))
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn topology_effect() -> Outcome {
    let dir = tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("default.conf");
    fs::write(&cfg, "").map_err(|e| e.to_string())?;
    let out = dir.path().join("out");
    let start = Instant::now();
    let o = thinseg(&["--deterministic", "ablate", "--axis", "lambda_cl", s(&cfg), s(&out)]);
    let took = start.elapsed();
    ensure(o.status.success(), String::from_utf8_lossy(&o.stderr).into_owned())?;
    let table = fs::read_to_string(out.join("ablation-lambda_cl.tsv")).map_err(|e| e.to_string())?;
    print!("{table}");
    let v = read_json(&out.join("ablation-lambda_cl.json"))?;
    let rows = v["rows"].as_array().ok_or("no rows")?;
    let values: Vec<f64> = rows.iter().filter_map(|r| r["value"].as_f64()).collect();
    ensure(values == [0.0, 0.25, 0.5, 1.0, 2.0], format!("rows {values:?}"))?;
    ensure(v["config"]["seeds"] == "0,1,2" && v["config"]["steps"] == "200", "not the default 3-seed run")?;
    let cl = |i: usize| rows[i]["summary"]["cl_dice"]["mean"].as_f64().unwrap_or(f64::NAN);
    let (base, half) = (cl(0), cl(2));
    ensure(half >= base - 0.01, format!("clDice {half:.4} at 0.5 vs {base:.4} at 0"))?;
    ensure(took < Duration::from_secs(600), format!("took {}", secs(took)))?;
    Ok(format!("clDice {half:.4} at 0.5 vs {base:.4} at 0, 5 rows, {}", secs(took)))
}

fn files_under(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn reproducibility() -> Outcome {
    let dir = tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, "steps = 50\n").map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = thinseg(&["--deterministic", "synth-train", s(&cfg), s(out)]);
        ensure(o.status.success(), String::from_utf8_lossy(&o.stderr).into_owned())?;
    }
    let (fa, fb) = (files_under(&a), files_under(&b));
    ensure(fa.len() == 11, format!("{} files written", fa.len()))?;
    ensure(fa == fb, "runs differ")?;

    let ckpt_path = a.join("seed-1/checkpoint.bin");
    let bytes = fs::read(&ckpt_path).map_err(|e| e.to_string())?;
    let ckpt = Checkpoint::load(&ckpt_path).map_err(|e| e.to_string())?;
    ensure(ckpt.encode() == bytes, "checkpoint does not re-encode to the same bytes")?;
    let train_cfg = thinseg::config::load_config(&cfg).map_err(|e| e.to_string())?;
    let (trainer, warning) = ckpt.restore(&train_cfg, &ckpt_path).map_err(|e| e.to_string())?;
    ensure(warning.is_none(), "unexpected config warning")?;
    ensure(Checkpoint::from_trainer(&trainer).encode() == bytes, "restored state differs")?;
    Ok(format!("{} files byte-identical across runs, checkpoint round-trips", fa.len()))
}

fn rank_ablation() -> Outcome {
    let dir = tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("rank.conf");
    fs::write(&cfg, "steps = 20\n").map_err(|e| e.to_string())?;
    let out = dir.path().join("out");
    let o = thinseg(&["--deterministic", "ablate", "--axis", "rank", s(&cfg), s(&out)]);
    ensure(o.status.success(), String::from_utf8_lossy(&o.stderr).into_owned())?;
    let v = read_json(&out.join("ablation-rank.json"))?;
    let rows = v["rows"].as_array().ok_or("no rows")?;
    let c = TrainConfig::default().channels as u64;
    let layers = TrainConfig::default().lora_layers as u64;
    let mut counts = Vec::new();
    for (row, r) in rows.iter().zip([4u64, 8, 16, 32]) {
        ensure(row["value"].as_f64() == Some(r as f64), format!("row {row}"))?;
        let n = row["trainable_params"].as_u64().ok_or("missing count")?;
        let expected = layers * r * 2 * c + (9 * c + c + c * c + c) + (c + 1);
        ensure(n == expected, format!("rank {r}: {n} != {expected}"))?;
        counts.push(n);
    }
    ensure(rows.len() == 4, format!("{} rows", rows.len()))?;
    ensure(counts.windows(2).all(|w| w[0] < w[1]), format!("counts {counts:?}"))?;
    let table = fs::read_to_string(out.join("ablation-rank.tsv")).map_err(|e| e.to_string())?;
    ensure(table.lines().count() == 5, "table rows")?;
    Ok(format!("ranks 4, 8, 16, 32 -> {counts:?} trainable"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", gradient_correctness),
        ("lora zero-init identity", lora_identity),
        ("adapter identity", adapter_identity),
        ("parameter accounting", param_accounting),
        ("loss-weight defaults", loss_weight_defaults),
        ("metric oracles", metric_oracles),
        ("calibration sanity", calibration_sanity),
        ("topology effect", topology_effect),
        ("reproducibility", reproducibility),
        ("rank ablation", rank_ablation),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
