//! Evaluation of binarized predictions: region overlap, boundary F-score,
//! centerline Dice, calibration error and mean/std aggregation.

mod calibration;
mod distance;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{soft_skeleton_of, SkeletonConfig};
use crate::math;
use crate::tensor::Tensor;

pub use calibration::ece;
pub use distance::{distance_transform, max_inscribed_radius, squared_distance_transform, DistanceMap};

/// Binary `H x W` mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::DataLength {
                expected: height * width,
                actual: data.len(),
            });
        }
        if height == 0 || width == 0 {
            return Err(Error::BadShape {
                op: "mask",
                shape: alloc::vec![height, width],
            });
        }
        Ok(Mask { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Mask { height, width, data }
    }

    /// Nonzero entries of a `[H, W]` or `[1, H, W]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = t.plane_dims()?;
        Mask::new(h, w, t.data().iter().map(|&v| v != 0.0).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// 0/1 tensor of shape `[1, H, W]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            alloc::vec![1, self.height, self.width],
            self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    pub fn flip_horizontal(&self) -> Mask {
        Mask::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    pub fn invert(&self) -> Mask {
        Mask::from_fn(self.height, self.width, |y, x| !self.get(y, x))
    }
}

fn same_dims(op: &'static str, a: &Mask, b: &Mask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::ShapeMismatch {
            op,
            left: alloc::vec![a.height, a.width],
            right: alloc::vec![b.height, b.width],
        });
    }
    Ok(())
}

/// `prob >= threshold`, for thresholds in `(0, 1)`.
pub fn binarize(prob: &Tensor, threshold: f64) -> Result<Mask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("binarize", "threshold must lie in (0, 1)"));
    }
    let (h, w) = prob.plane_dims()?;
    Mask::new(h, w, prob.data().iter().map(|&p| p >= threshold).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn from_masks(pred: &Mask, gt: &Mask) -> Result<Self> {
        same_dims("confusion", pred, gt)?;
        let mut c = ConfusionCounts::default();
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub counts: ConfusionCounts,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Dice, IoU, precision and recall. Two empty masks score 1 on all four;
/// otherwise any `0/0` is 0.
pub fn region_metrics(pred: &Mask, gt: &Mask) -> Result<RegionMetrics> {
    let counts = ConfusionCounts::from_masks(pred, gt)?;
    let ConfusionCounts { tp, fp, fn_, .. } = counts;
    if tp + fp + fn_ == 0 {
        return Ok(RegionMetrics {
            dice: 1.0,
            iou: 1.0,
            precision: 1.0,
            recall: 1.0,
            counts,
        });
    }
    Ok(RegionMetrics {
        dice: ratio(2 * tp, 2 * tp + fp + fn_),
        iou: ratio(tp, tp + fp + fn_),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        counts,
    })
}

/// Foreground pixels with a background 4-neighbour; off-image counts as
/// background.
pub fn boundary_extract(mask: &Mask) -> Mask {
    let (h, w) = (mask.height, mask.width);
    Mask::from_fn(h, w, |y, x| {
        mask.get(y, x)
            && (y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !mask.get(y - 1, x)
                || !mask.get(y + 1, x)
                || !mask.get(y, x - 1)
                || !mask.get(y, x + 1))
    })
}

fn within_tolerance(from: &Mask, to: &Mask, tol: f64) -> f64 {
    let d = distance_transform(to);
    let total = from.count();
    let hit = from
        .data
        .iter()
        .zip(d.data())
        .filter(|&(&f, &dist)| f && dist <= tol)
        .count();
    ratio(hit as u64, total as u64)
}

/// F1 over contour pixels that lie within `tolerance` pixels of the other
/// mask's contour.
pub fn bf_score(pred: &Mask, gt: &Mask, tolerance: f64) -> Result<f64> {
    same_dims("bf_score", pred, gt)?;
    if !(tolerance > 0.0) {
        return Err(Error::invalid("bf_score", "tolerance must be > 0"));
    }
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let cp = boundary_extract(pred);
    let cg = boundary_extract(gt);
    let p = within_tolerance(&cp, &cg, tolerance);
    let r = within_tolerance(&cg, &cp, tolerance);
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

/// Smoothing constant of the centerline Dice metric.
pub const CL_DICE_METRIC_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClDiceMetric {
    pub value: f64,
    /// Skeleton iterations needed to thin the thicker mask completely.
    pub required_iterations: usize,
    pub sufficient: bool,
}

/// Centerline Dice of two binary masks using the soft skeleton.
pub fn cl_dice_metric(pred: &Mask, gt: &Mask, cfg: &SkeletonConfig) -> Result<ClDiceMetric> {
    same_dims("cl_dice_metric", pred, gt)?;
    let radius = max_inscribed_radius(pred).max(max_inscribed_radius(gt));
    let required_iterations = math::ceil(radius) as usize;
    let sufficient = cfg.iterations() >= required_iterations;
    if pred.is_empty() && gt.is_empty() {
        return Ok(ClDiceMetric {
            value: 1.0,
            required_iterations,
            sufficient,
        });
    }
    let p = pred.to_tensor();
    let g = gt.to_tensor();
    let sp = soft_skeleton_of(&p, cfg)?;
    let sg = soft_skeleton_of(&g, cfg)?;
    let eps = CL_DICE_METRIC_EPS;
    let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
    let total = |a: &Tensor| a.data().iter().sum::<f64>();
    let tprec = (dot(&sp, &g) + eps) / (total(&sp) + eps);
    let tsens = (dot(&sg, &p) + eps) / (total(&sg) + eps);
    Ok(ClDiceMetric {
        value: 2.0 * tprec * tsens / (tprec + tsens),
        required_iterations,
        sufficient,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSettings {
    pub threshold: f64,
    pub tolerance: f64,
    pub ece_bins: usize,
    pub skeleton_iterations: usize,
}

impl Default for MetricSettings {
    fn default() -> Self {
        MetricSettings {
            threshold: 0.5,
            tolerance: 2.0,
            ece_bins: 10,
            skeleton_iterations: 10,
        }
    }
}

/// All metrics of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub bf_score: f64,
    pub cl_dice: f64,
    pub ece: f64,
}

impl ImageMetrics {
    pub const NAMES: [&'static str; 7] = ["dice", "iou", "precision", "recall", "bf_score", "cl_dice", "ece"];

    pub fn values(&self) -> [f64; 7] {
        [
            self.dice,
            self.iou,
            self.precision,
            self.recall,
            self.bf_score,
            self.cl_dice,
            self.ece,
        ]
    }
}

/// Scores a probability map against a binary ground truth. The second
/// value is a warning when the skeleton iterations are too few.
pub fn evaluate_image(
    id: &str,
    prob: &Tensor,
    gt: &Mask,
    settings: &MetricSettings,
) -> Result<(ImageMetrics, Option<String>)> {
    let pred = binarize(prob, settings.threshold)?;
    let region = region_metrics(&pred, gt)?;
    let bf = bf_score(&pred, gt, settings.tolerance)?;
    let cfg = SkeletonConfig::new(settings.skeleton_iterations)?;
    let cl = cl_dice_metric(&pred, gt, &cfg)?;
    let calib = ece(prob, gt, settings.ece_bins)?;
    let warning = (!cl.sufficient).then(|| {
        format!(
            "{id}: {} skeleton iterations < {} needed for the thickest structure",
            settings.skeleton_iterations, cl.required_iterations
        )
    });
    Ok((
        ImageMetrics {
            id: id.into(),
            dice: region.dice,
            iou: region.iou,
            precision: region.precision,
            recall: region.recall,
            bf_score: bf,
            cl_dice: cl.value,
            ece: calib,
        },
        warning,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation. Values are summed in sorted
/// order so the result does not depend on input order.
pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::EmptyTensor { op: "summarize" });
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let mut dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    dev.sort_by(f64::total_cmp);
    let var = dev.iter().sum::<f64>() / n;
    Ok(Summary {
        mean,
        std: math::sqrt(var),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub dice: Summary,
    pub iou: Summary,
    pub precision: Summary,
    pub recall: Summary,
    pub bf_score: Summary,
    pub cl_dice: Summary,
    pub ece: Summary,
}

impl AggregateMetrics {
    pub fn get(&self, name: &str) -> Option<Summary> {
        Some(match name {
            "dice" => self.dice,
            "iou" => self.iou,
            "precision" => self.precision,
            "recall" => self.recall,
            "bf_score" => self.bf_score,
            "cl_dice" => self.cl_dice,
            "ece" => self.ece,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    pub aggregate: AggregateMetrics,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Per-metric mean and std over a nonempty image list. Images are kept
/// sorted by id.
pub fn aggregate(images: Vec<ImageMetrics>, warnings: Vec<String>) -> Result<MetricReport> {
    if images.is_empty() {
        return Err(Error::EmptyTensor { op: "aggregate" });
    }
    let mut images = images;
    images.sort_by(|a, b| a.id.cmp(&b.id));
    let col = |i: usize| -> Result<Summary> {
        let v: Vec<f64> = images.iter().map(|m| m.values()[i]).collect();
        summarize(&v)
    };
    let aggregate = AggregateMetrics {
        dice: col(0)?,
        iou: col(1)?,
        precision: col(2)?,
        recall: col(3)?,
        bf_score: col(4)?,
        cl_dice: col(5)?,
        ece: col(6)?,
    };
    let mut warnings = warnings;
    warnings.sort();
    Ok(MetricReport {
        images,
        aggregate,
        warnings,
    })
}
