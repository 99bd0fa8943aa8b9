//! Synthetic thin-structure images: smooth random curves with optional
//! branches, rendered as blurred, noisy images with gaps that the mask
//! bridges.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::metrics::Mask;
use crate::tensor::Tensor;

pub const MIN_EXTENT: usize = 32;
const MAX_CURVES: usize = 64;
const CONTROL_POINTS: usize = 5;
const BRANCH_PROBABILITY: f64 = 0.5;
const MAX_STEP: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub n_curves: usize,
    /// Stroke width bounds in pixels.
    pub width_range: [f64; 2],
    pub gap_probability: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Number of samples to generate.
    pub count: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 32,
            width: 32,
            n_curves: 2,
            width_range: [1.0, 3.0],
            gap_probability: 0.5,
            noise_sigma: 0.1,
            seed: 0,
            count: 16,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("synth", reason));
        if self.height < MIN_EXTENT || self.width < MIN_EXTENT {
            return bad(format!("extents must be >= {MIN_EXTENT}"));
        }
        let [lo, hi] = self.width_range;
        if !(lo >= 1.0 && hi >= lo && hi.is_finite()) {
            return bad("width_range needs 1 <= min <= max".into());
        }
        if hi > self.height.min(self.width) as f64 / 4.0 {
            return bad("curves this wide cannot fit the image".into());
        }
        if self.n_curves == 0 || self.n_curves > MAX_CURVES {
            return bad(format!("n_curves must lie in 1..={MAX_CURVES}"));
        }
        if !(0.0..=1.0).contains(&self.gap_probability) {
            return bad("gap_probability must lie in [0, 1]".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and >= 0".into());
        }
        Ok(())
    }
}

/// One training example: `image` is `[1, H, W]` in `[0, 1]`, `mask` is a
/// 0/1 `[H, W]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub image: Tensor,
    pub mask: Tensor,
}

impl SamplePair {
    pub fn mask_bits(&self) -> Mask {
        Mask::from_tensor(&self.mask).expect("generated masks are planar")
    }
}

type Point = (f64, f64);

struct Stroke {
    points: Vec<Point>,
    radius: f64,
    /// Half-open range of `points` left out of the image.
    gap: Option<(usize, usize)>,
}

/// Generates `cfg.count` samples. Sample `i` depends only on `cfg` and `i`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<SamplePair>> {
    cfg.validate()?;
    (0..cfg.count).map(|i| synth_sample(cfg, i)).collect()
}

pub fn synth_sample(cfg: &SynthConfig, index: usize) -> Result<SamplePair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let (h, w) = (cfg.height, cfg.width);

    let mut strokes = Vec::new();
    for _ in 0..cfg.n_curves {
        let width = rng.random_range(cfg.width_range[0]..=cfg.width_range[1]);
        let radius = width / 2.0;
        let start = (
            rng.random_range(0.2..0.8) * (h - 1) as f64,
            rng.random_range(0.2..0.8) * (w - 1) as f64,
        );
        let heading = rng.random_range(0.0..core::f64::consts::TAU);
        let main = curve(&mut rng, start, heading, CONTROL_POINTS, h, w);
        if rng.random_bool(BRANCH_PROBABILITY) && main.len() > 8 {
            let at = rng.random_range(main.len() / 4..3 * main.len() / 4);
            let heading = heading + rng.random_range(0.6..1.2) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let branch = curve(&mut rng, main[at], heading, CONTROL_POINTS - 2, h, w);
            strokes.push(stroke(&mut rng, branch, radius.max(0.5) * 0.75, cfg.gap_probability));
        }
        strokes.push(stroke(&mut rng, main, radius, cfg.gap_probability));
    }

    let mut mask = vec![false; h * w];
    let mut render = vec![0.0; h * w];
    for s in &strokes {
        for (k, &p) in s.points.iter().enumerate() {
            stamp(p, s.radius, h, w, |i| mask[i] = true);
            let gapped = s.gap.is_some_and(|(a, b)| (a..b).contains(&k));
            if !gapped {
                stamp(p, s.radius, h, w, |i| render[i] = 1.0);
            }
        }
    }

    let blurred = blur(&render, h, w);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|_| Error::invalid("synth", "bad noise_sigma"))?;
    let image: Vec<f64> = blurred
        .into_iter()
        .map(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0))
        .collect();

    Ok(SamplePair {
        id: format!("synth-{:04}", index),
        image: Tensor::new(vec![1, h, w], image)?,
        mask: Tensor::new(vec![h, w], mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())?,
    })
}

fn stroke(rng: &mut ChaCha8Rng, points: Vec<Point>, radius: f64, gap_probability: f64) -> Stroke {
    let mut arc = Vec::with_capacity(points.len());
    let mut total = 0.0;
    for (k, p) in points.iter().enumerate() {
        if k > 0 {
            let q = points[k - 1];
            total += math::sqrt((p.0 - q.0) * (p.0 - q.0) + (p.1 - q.1) * (p.1 - q.1));
        }
        arc.push(total);
    }
    // The erased stretch spans 3 to 6 px of clear background plus the
    // stamp radius on each side, away from the curve ends.
    let len = rng.random_range(3.0..=6.0) + 2.0 * radius;
    let gap = if total > 3.0 * len && rng.random_bool(gap_probability) {
        let from = rng.random_range(total / 3.0..total * 2.0 / 3.0 - len * 0.5);
        let a = arc.partition_point(|&s| s < from);
        let b = arc.partition_point(|&s| s < from + len);
        Some((a, b))
    } else {
        None
    };
    Stroke { points, radius, gap }
}

/// Catmull-Rom curve through a random walk of control points, resampled so
/// that consecutive points are at most `MAX_STEP` apart.
fn curve(rng: &mut ChaCha8Rng, start: Point, heading: f64, n: usize, h: usize, w: usize) -> Vec<Point> {
    let step = h.min(w) as f64 * 0.18;
    let (ymax, xmax) = ((h - 1) as f64, (w - 1) as f64);
    let mut ctrl = vec![start];
    let mut theta = heading;
    for _ in 1..n {
        theta += rng.random_range(-0.6..0.6);
        let (y, x) = *ctrl.last().expect("nonempty");
        let mut ny = y + step * math::sin(theta);
        let mut nx = x + step * math::cos(theta);
        if !(0.0..=ymax).contains(&ny) || !(0.0..=xmax).contains(&nx) {
            // Turn back into the image.
            theta += core::f64::consts::PI;
            ny = (y + step * math::sin(theta)).clamp(0.0, ymax);
            nx = (x + step * math::cos(theta)).clamp(0.0, xmax);
        }
        ctrl.push((ny, nx));
    }

    let mut pts: Vec<Point> = Vec::new();
    let last = ctrl.len() - 1;
    for i in 0..last {
        let p0 = ctrl[i.saturating_sub(1)];
        let (p1, p2) = (ctrl[i], ctrl[i + 1]);
        let p3 = ctrl[(i + 2).min(last)];
        let samples = 32;
        for k in 0..samples {
            let t = k as f64 / samples as f64;
            push_dense(&mut pts, catmull_rom(p0, p1, p2, p3, t), ymax, xmax);
        }
    }
    push_dense(&mut pts, ctrl[last], ymax, xmax);
    pts
}

fn catmull_rom(p0: Point, p1: Point, p2: Point, p3: Point, t: f64) -> Point {
    let f = |a: f64, b: f64, c: f64, d: f64| {
        0.5 * (2.0 * b + (c - a) * t + (2.0 * a - 5.0 * b + 4.0 * c - d) * t * t + (3.0 * b - a - 3.0 * c + d) * t * t * t)
    };
    (f(p0.0, p1.0, p2.0, p3.0), f(p0.1, p1.1, p2.1, p3.1))
}

fn push_dense(pts: &mut Vec<Point>, p: Point, ymax: f64, xmax: f64) {
    let p = (p.0.clamp(0.0, ymax), p.1.clamp(0.0, xmax));
    if let Some(&q) = pts.last() {
        let d = math::sqrt((p.0 - q.0) * (p.0 - q.0) + (p.1 - q.1) * (p.1 - q.1));
        let n = math::ceil(d / MAX_STEP) as usize;
        for k in 1..n {
            let t = k as f64 / n as f64;
            pts.push((q.0 + t * (p.0 - q.0), q.1 + t * (p.1 - q.1)));
        }
    }
    pts.push(p);
}

/// Marks every pixel within `radius` of the rounded centre, always
/// including the centre itself.
fn stamp(p: Point, radius: f64, h: usize, w: usize, mut mark: impl FnMut(usize)) {
    let (cy, cx) = (math::round(p.0) as i64, math::round(p.1) as i64);
    let r = math::floor(radius) as i64;
    for dy in -r..=r {
        for dx in -r..=r {
            if (dy * dy + dx * dx) as f64 > radius * radius && (dy, dx) != (0, 0) {
                continue;
            }
            let (y, x) = (cy + dy, cx + dx);
            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                mark(y as usize * w + x as usize);
            }
        }
    }
}

/// Separable `[1, 2, 1] / 4` blur with edge replication.
fn blur(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |v: &[f64], y: usize, x: usize| v[y * w + x];
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let l = at(src, y, x.saturating_sub(1));
            let r = at(src, y, (x + 1).min(w - 1));
            tmp[y * w + x] = 0.25 * l + 0.5 * at(src, y, x) + 0.25 * r;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let u = at(&tmp, y.saturating_sub(1), x);
            let d = at(&tmp, (y + 1).min(h - 1), x);
            out[y * w + x] = 0.25 * u + 0.5 * at(&tmp, y, x) + 0.25 * d;
        }
    }
    out
}
