//! Shared data model: annotations, predictions, dataset metadata, and box
//! geometry.
//!
//! Boxes are corner-form `[x1, y1, x2, y2]` with `x1 < x2` and `y1 < y2`.
//! Class index 0 is reserved for the background class everywhere, so class
//! probability vectors have `J + 1` entries with index 0 = background.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Corner-form bounding box `[x1, y1, x2, y2]`.
pub type BBox = [f64; 4];

/// Tolerance below which a class-probability vector is silently renormalized
/// instead of rejected.
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

/// Where a prediction's scalar certainty comes from when the field is absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertaintySource {
    /// One minus the background probability.
    Foreground,
    /// A separate objectness head; cannot be derived from class probabilities.
    Objectness,
    /// Maximum foreground class probability.
    MaxClass,
}

/// Dataset-level configuration shared by every record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_classes: usize,
    pub num_annotators: usize,
    pub class_names: Vec<String>,
    pub certainty_source: CertaintySource,
}

impl DatasetMeta {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 {
            return Err(Error::invalid("meta: num_classes must be >= 1"));
        }
        if self.num_annotators < 2 {
            return Err(Error::invalid("meta: num_annotators must be >= 2"));
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::invalid(format!(
                "meta: class_names has {} entries, expected num_classes = {}",
                self.class_names.len(),
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// One annotator's labeled box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Class label in `1..=J`; 0 is reserved for background.
    pub class_id: usize,
    /// Annotator in `1..=K`.
    pub annotator_id: usize,
}

/// All annotations on one image, from every annotator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAnnotations {
    pub image_id: String,
    pub width: f64,
    pub height: f64,
    pub annotations: Vec<Annotation>,
}

/// Probabilistic detection: Gaussian box (diagonal covariance) plus a
/// categorical class distribution and a scalar certainty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    /// Predicted box mean, corner form.
    pub mean: BBox,
    /// Per-coordinate variance (the diagonal of the box covariance), px^2.
    pub var: BBox,
    /// `J + 1` probabilities, index 0 = background.
    pub class_probs: Vec<f64>,
    /// Confidence that the prediction contains an object, in [0, 1].
    pub certainty: f64,
}

impl Prediction {
    /// Index of the most probable foreground class (ties broken by lowest
    /// class id). Returns 1 for a pure-background vector.
    pub fn argmax_foreground(&self) -> usize {
        argmax_foreground(&self.class_probs)
    }

    /// Maximum foreground class probability.
    pub fn max_foreground_prob(&self) -> f64 {
        self.class_probs[1..].iter().cloned().fold(0.0, f64::max)
    }
}

/// Argmax over foreground entries of a `J + 1` probability vector, ties
/// broken by lowest class id.
pub fn argmax_foreground(probs: &[f64]) -> usize {
    let mut best = 1;
    for (j, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = j;
        }
    }
    best
}

/// Counts of matched and unmatched instances backing a metrics report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Per-image metric breakdown, diagnostic only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image_id: String,
    pub tvd: f64,
    pub tvd_fp: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lue: Option<f64>,
    pub fne: f64,
    pub mean: f64,
    pub counts: MatchCounts,
}

/// The four calibration metrics and their aggregate, pooled over a dataset.
///
/// `lue` is absent when there are no true positives to evaluate it on; the
/// aggregate then renormalizes its weights over the defined metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tvd: f64,
    pub tvd_fp: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lue: Option<f64>,
    pub fne: f64,
    pub mean: f64,
    pub counts: MatchCounts,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_image: Option<Vec<ImageMetrics>>,
    /// Image ids that appear in the predictions but not in the annotations.
    /// Such predictions are kept and counted as false positives.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub unknown_image_ids: Vec<String>,
}

/// Scale a probability vector so it sums to exactly 1.0.
///
/// After the division, the sub-ulp residual is dumped onto the largest entry
/// so the result is a fixpoint of renormalization; every producer of
/// probability vectors uses this, which is what makes load -> save -> load
/// byte-stable.
pub fn normalize_class_probs(probs: &mut [f64]) {
    let sum: f64 = probs.iter().sum();
    if sum == 1.0 || sum <= 0.0 {
        return;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    let m = probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
        .map(|(i, _)| i)
        .unwrap_or(0);
    for _ in 0..8 {
        let total: f64 = probs.iter().sum();
        if total == 1.0 {
            break;
        }
        probs[m] = (probs[m] + (1.0 - total)).clamp(0.0, 1.0);
    }
}

/// Intersection over union of two corner-form boxes. Zero when disjoint.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    inter / (area_a + area_b - inter)
}

/// True when the box has strictly positive width and height.
pub fn box_is_valid(b: &BBox) -> bool {
    b[0] < b[2] && b[1] < b[3] && b.iter().all(|v| v.is_finite())
}

pub(crate) fn validate_annotation(
    ann: &Annotation,
    image_id: &str,
    meta: &DatasetMeta,
) -> Result<()> {
    if !box_is_valid(&ann.bbox) {
        return Err(Error::invalid(format!(
            "image {image_id}: degenerate box [{}, {}, {}, {}] (requires x1 < x2 and y1 < y2)",
            ann.bbox[0], ann.bbox[1], ann.bbox[2], ann.bbox[3]
        )));
    }
    if ann.class_id == 0 {
        return Err(Error::invalid(format!(
            "image {image_id}: class_id 0 is reserved for background"
        )));
    }
    if ann.class_id > meta.num_classes {
        return Err(Error::invalid(format!(
            "image {image_id}: class_id {} out of range 1..={}",
            ann.class_id, meta.num_classes
        )));
    }
    if ann.annotator_id == 0 || ann.annotator_id > meta.num_annotators {
        return Err(Error::invalid(format!(
            "image {image_id}: annotator_id {} out of range 1..={}",
            ann.annotator_id, meta.num_annotators
        )));
    }
    Ok(())
}

/// Clamp a box to the image bounds. The caller re-checks validity afterwards
/// since a box entirely outside the image collapses to a degenerate one.
pub(crate) fn clamp_box(b: &BBox, width: f64, height: f64) -> BBox {
    [
        b[0].clamp(0.0, width),
        b[1].clamp(0.0, height),
        b[2].clamp(0.0, width),
        b[3].clamp(0.0, height),
    ]
}

/// Validate a prediction in place: variance nonnegative, probability vector of
/// the right length summing to one within [`PROB_SUM_TOLERANCE`] (silently
/// renormalized below it), valid mean box, certainty derived from
/// `meta.certainty_source` when absent.
pub(crate) fn validate_prediction(
    pred: &mut Prediction,
    index: usize,
    certainty_present: bool,
    meta: &DatasetMeta,
) -> Result<()> {
    let ctx = format!("prediction {index} (image {})", pred.image_id);
    if pred.var.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid(format!("{ctx}: negative variance")));
    }
    if !box_is_valid(&pred.mean) {
        return Err(Error::invalid(format!(
            "{ctx}: mean box must satisfy x1 < x2 and y1 < y2"
        )));
    }
    if pred.class_probs.len() != meta.num_classes + 1 {
        return Err(Error::invalid(format!(
            "{ctx}: class_probs has {} entries, expected J + 1 = {}",
            pred.class_probs.len(),
            meta.num_classes + 1
        )));
    }
    if pred
        .class_probs
        .iter()
        .any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0)
    {
        return Err(Error::invalid(format!(
            "{ctx}: class_probs entries must lie in [0, 1]"
        )));
    }
    let sum: f64 = pred.class_probs.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
        return Err(Error::invalid(format!(
            "{ctx}: class_probs sum to {sum}, outside 1 +/- {PROB_SUM_TOLERANCE}"
        )));
    }
    normalize_class_probs(&mut pred.class_probs);
    if certainty_present {
        if !(0.0..=1.0).contains(&pred.certainty) {
            return Err(Error::invalid(format!(
                "{ctx}: certainty {} outside [0, 1]",
                pred.certainty
            )));
        }
    } else {
        pred.certainty = match meta.certainty_source {
            CertaintySource::Foreground => 1.0 - pred.class_probs[0],
            CertaintySource::MaxClass => pred.max_foreground_prob(),
            CertaintySource::Objectness => {
                return Err(Error::invalid(format!(
                    "{ctx}: certainty field required when certainty_source = objectness"
                )))
            }
        };
    }
    Ok(())
}
