//! Ground-truth-free calibration metrics.
//!
//! TVD compares predicted class distributions to the clusters' soft labels
//! (false negatives enter with a one-hot background prediction, false
//! positives are scored separately against a one-hot background target).
//! LUE compares the prediction certainty to the fraction of member boxes
//! inside the certainty-level Gaussian interval. FNE charges missed clusters
//! by their annotator agreement. Metrics are pooled over the dataset's
//! TP/FP/FN sets, not averaged per image.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalmatch::{match_predictions, MatchOutcome, ZeroIouGuard};
use crate::model::{
    argmax_foreground, BBox, DatasetMeta, ImageAnnotations, ImageMetrics, MatchCounts,
    MetricsReport, Prediction,
};
use crate::normal::central_interval_z;
use crate::preprocess::{cluster_annotations, AnnotationCluster};

pub const DEFAULT_MIN_IOU: f64 = 0.5;
pub const DEFAULT_GAMMA: f64 = 0.999;
pub const DEFAULT_VAR_FLOOR: f64 = 1e-6;
pub const DEFAULT_BINS: usize = 10;

/// Knobs shared by evaluation, calibrator fitting, and the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Admission IoU for annotation clustering.
    pub min_iou: f64,
    /// Confidence clamp for interval and variance computations.
    pub gamma: f64,
    /// Variance floor inside the Mahalanobis cost and interval widths.
    pub var_floor: f64,
    pub zero_iou_guard: ZeroIouGuard,
    /// Optional prediction filter; off by default (predictions are evaluated
    /// exactly as given).
    pub min_certainty: Option<f64>,
    /// Aggregate weights for (tvd, tvd_fp, lue, fne).
    pub weights: [f64; 4],
    /// Include the per-image diagnostic breakdown in the report.
    pub per_image: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            min_iou: DEFAULT_MIN_IOU,
            gamma: DEFAULT_GAMMA,
            var_floor: DEFAULT_VAR_FLOOR,
            zero_iou_guard: ZeroIouGuard::default(),
            min_certainty: None,
            weights: [1.0; 4],
            per_image: false,
        }
    }
}

/// Clustered, matched state of one image; the unit the pooled metrics and
/// reliability diagrams are computed from.
#[derive(Debug, Clone)]
pub struct ImageEval {
    pub image_id: String,
    pub clusters: Vec<AnnotationCluster>,
    pub preds: Vec<Prediction>,
    pub outcome: MatchOutcome,
}

/// Total variation distance between two categorical distributions.
pub fn tvd_pair(t: &[f64], p: &[f64]) -> f64 {
    debug_assert_eq!(t.len(), p.len());
    0.5 * t
        .iter()
        .zip(p)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
}

fn one_hot_background_tvd(t: &[f64]) -> f64 {
    // tvd_pair(t, one-hot background) simplifies to 1 - t[0].
    1.0 - t[0]
}

/// Central Gaussian interval implied by the prediction certainty.
pub fn box_interval(pred: &Prediction, gamma: f64) -> (BBox, BBox) {
    let z = central_interval_z(pred.certainty, gamma);
    let mut lower = [0.0; 4];
    let mut upper = [0.0; 4];
    for i in 0..4 {
        let half = z * pred.var[i].max(0.0).sqrt();
        lower[i] = pred.mean[i] - half;
        upper[i] = pred.mean[i] + half;
    }
    (lower, upper)
}

/// Fraction of the cluster's member boxes strictly inside the prediction's
/// certainty interval on all four coordinates. Boundary values count as
/// outside.
pub fn interval_coverage(cluster: &AnnotationCluster, pred: &Prediction, gamma: f64) -> f64 {
    let (lower, upper) = box_interval(pred, gamma);
    let inside = cluster
        .members
        .iter()
        .filter(|m| (0..4).all(|i| lower[i] < m.bbox[i] && m.bbox[i] < upper[i]))
        .count();
    inside as f64 / cluster.members.len() as f64
}

/// Weighted geometric mean of the metric complements, inverted back.
///
/// An undefined LUE (no true positives anywhere) is excluded by dropping its
/// weight rather than poisoning the aggregate.
pub fn aggregate_mean(tvd: f64, tvd_fp: f64, lue: Option<f64>, fne: f64, weights: [f64; 4]) -> f64 {
    let mut terms: Vec<(f64, f64)> = vec![(tvd, weights[0]), (tvd_fp, weights[1])];
    if let Some(l) = lue {
        terms.push((l, weights[2]));
    }
    terms.push((fne, weights[3]));
    let total_weight: f64 = terms.iter().map(|(_, w)| w).sum();
    let mut product = 1.0;
    for (m, w) in terms {
        product *= (1.0 - m).max(0.0).powf(w / total_weight);
    }
    1.0 - product
}

struct PooledMetrics {
    tvd: f64,
    tvd_fp: f64,
    lue: Option<f64>,
    fne: f64,
    counts: MatchCounts,
}

fn pool_metrics<'a>(evals: impl Iterator<Item = &'a ImageEval>, gamma: f64) -> PooledMetrics {
    let mut tvd_sum = 0.0;
    let mut tvd_n = 0usize;
    let mut fp_sum = 0.0;
    let mut lue_sum = 0.0;
    let mut fne_sum = 0.0;
    let mut counts = MatchCounts {
        tp: 0,
        fp: 0,
        fn_: 0,
    };
    for eval in evals {
        for &(pi, ci) in &eval.outcome.tp {
            let cluster = &eval.clusters[ci];
            let pred = &eval.preds[pi];
            tvd_sum += tvd_pair(&cluster.soft_label, &pred.class_probs);
            lue_sum += (pred.certainty - interval_coverage(cluster, pred, gamma)).abs();
        }
        for &ci in &eval.outcome.fn_ {
            let cluster = &eval.clusters[ci];
            tvd_sum += one_hot_background_tvd(&cluster.soft_label);
            fne_sum += cluster.annotator_certainty;
        }
        for &pi in &eval.outcome.fp {
            fp_sum += one_hot_background_tvd(&eval.preds[pi].class_probs);
        }
        counts.tp += eval.outcome.tp.len();
        counts.fp += eval.outcome.fp.len();
        counts.fn_ += eval.outcome.fn_.len();
        tvd_n += eval.outcome.tp.len() + eval.outcome.fn_.len();
    }
    PooledMetrics {
        tvd: if tvd_n > 0 { tvd_sum / tvd_n as f64 } else { 0.0 },
        tvd_fp: if counts.fp > 0 {
            fp_sum / counts.fp as f64
        } else {
            0.0
        },
        lue: if counts.tp > 0 {
            Some(lue_sum / counts.tp as f64)
        } else {
            None
        },
        fne: if counts.fn_ > 0 {
            fne_sum / counts.fn_ as f64
        } else {
            0.0
        },
        counts,
    }
}

/// Cluster and match every image. Predictions for image ids absent from the
/// annotations are kept as pure-FP pseudo images; their ids are returned
/// separately for the report.
pub fn match_dataset(
    images: &[ImageAnnotations],
    predictions: &[Prediction],
    meta: &DatasetMeta,
    opts: &EvalOptions,
) -> (Vec<ImageEval>, Vec<String>) {
    let mut preds_by_image: BTreeMap<String, Vec<Prediction>> = BTreeMap::new();
    for pred in predictions {
        if let Some(min) = opts.min_certainty {
            if pred.certainty < min {
                continue;
            }
        }
        preds_by_image
            .entry(pred.image_id.clone())
            .or_default()
            .push(pred.clone());
    }

    let mut sorted: Vec<&ImageAnnotations> = images.iter().collect();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    let mut evals = Vec::with_capacity(sorted.len());
    for image in sorted {
        let clusters = cluster_annotations(image, meta, opts.min_iou, opts.gamma);
        let preds = preds_by_image.remove(&image.image_id).unwrap_or_default();
        let outcome = match_predictions(
            &clusters,
            &preds,
            meta.num_annotators,
            opts.var_floor,
            opts.zero_iou_guard,
        );
        evals.push(ImageEval {
            image_id: image.image_id.clone(),
            clusters,
            preds,
            outcome,
        });
    }

    // Whatever is left references unknown images: all false positives.
    let mut unknown = Vec::new();
    for (image_id, preds) in preds_by_image {
        unknown.push(image_id.clone());
        let outcome = MatchOutcome {
            tp: Vec::new(),
            fp: (0..preds.len()).collect(),
            fn_: Vec::new(),
        };
        evals.push(ImageEval {
            image_id,
            clusters: Vec::new(),
            preds,
            outcome,
        });
    }
    (evals, unknown)
}

/// Pooled metrics report from matched images.
pub fn metrics_from_evals(
    evals: &[ImageEval],
    opts: &EvalOptions,
    unknown_image_ids: Vec<String>,
) -> MetricsReport {
    let pooled = pool_metrics(evals.iter(), opts.gamma);
    let per_image = if opts.per_image {
        Some(
            evals
                .iter()
                .map(|e| {
                    let m = pool_metrics(std::iter::once(e), opts.gamma);
                    ImageMetrics {
                        image_id: e.image_id.clone(),
                        tvd: m.tvd,
                        tvd_fp: m.tvd_fp,
                        lue: m.lue,
                        fne: m.fne,
                        mean: aggregate_mean(m.tvd, m.tvd_fp, m.lue, m.fne, opts.weights),
                        counts: m.counts,
                    }
                })
                .collect(),
        )
    } else {
        None
    };
    MetricsReport {
        tvd: pooled.tvd,
        tvd_fp: pooled.tvd_fp,
        lue: pooled.lue,
        fne: pooled.fne,
        mean: aggregate_mean(pooled.tvd, pooled.tvd_fp, pooled.lue, pooled.fne, opts.weights),
        counts: pooled.counts,
        per_image,
        unknown_image_ids,
    }
}

/// Full pipeline: cluster, match, pool, aggregate.
pub fn evaluate_dataset(
    images: &[ImageAnnotations],
    predictions: &[Prediction],
    meta: &DatasetMeta,
    opts: &EvalOptions,
) -> MetricsReport {
    let (evals, unknown) = match_dataset(images, predictions, meta, opts);
    metrics_from_evals(&evals, opts, unknown)
}

// ---------------------------------------------------------------------------
// Reliability diagram data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinKind {
    ClassLabel,
    BoundingBox,
}

/// Equal-width reliability bins over [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub kind: BinKind,
    /// B + 1 ascending edges.
    pub edges: Vec<f64>,
    pub mean_confidence: Vec<Option<f64>>,
    pub mean_agreement: Vec<Option<f64>>,
    pub sample_fraction: Vec<f64>,
}

impl ReliabilityBins {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,mean_conf,mean_agreement,sample_fraction\n");
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for i in 0..self.sample_fraction.len() {
            out.push_str(&format!(
                "{:.6},{:.6},{},{},{:.6}\n",
                self.edges[i],
                self.edges[i + 1],
                fmt(self.mean_confidence[i]),
                fmt(self.mean_agreement[i]),
                self.sample_fraction[i]
            ));
        }
        out
    }
}

/// Bin predictions by confidence and average the annotator agreement per bin.
///
/// `ClassLabel` bins TP and FN instances by the maximum foreground class
/// probability; agreement is the fraction of annotators whose label equals
/// the predicted argmax class (for FN the prediction is one-hot background,
/// so confidence is 0 and the argmax convention falls back to the lowest
/// class id). `BoundingBox` bins TP instances by certainty; agreement is the
/// interval coverage used by LUE.
pub fn reliability_bins(
    evals: &[ImageEval],
    num_bins: usize,
    kind: BinKind,
    gamma: f64,
) -> Result<ReliabilityBins> {
    if num_bins < 2 {
        return Err(Error::invalid(format!(
            "reliability bins require B >= 2, got {num_bins}"
        )));
    }
    let mut samples: Vec<(f64, f64)> = Vec::new();
    for eval in evals {
        match kind {
            BinKind::ClassLabel => {
                for &(pi, ci) in &eval.outcome.tp {
                    let pred = &eval.preds[pi];
                    let conf = pred.max_foreground_prob();
                    let agree = eval.clusters[ci].soft_label[pred.argmax_foreground()];
                    samples.push((conf, agree));
                }
                for &ci in &eval.outcome.fn_ {
                    // One-hot background stand-in: zero confidence, argmax
                    // falls back to class 1.
                    let agree = eval.clusters[ci].soft_label[argmax_foreground(&one_hot_bg())];
                    samples.push((0.0, agree));
                }
            }
            BinKind::BoundingBox => {
                for &(pi, ci) in &eval.outcome.tp {
                    let pred = &eval.preds[pi];
                    let agree = interval_coverage(&eval.clusters[ci], pred, gamma);
                    samples.push((pred.certainty, agree));
                }
            }
        }
    }

    let edges: Vec<f64> = (0..=num_bins).map(|i| i as f64 / num_bins as f64).collect();
    let mut conf_sum = vec![0.0; num_bins];
    let mut agree_sum = vec![0.0; num_bins];
    let mut count = vec![0usize; num_bins];
    for (conf, agree) in &samples {
        let idx = ((conf * num_bins as f64) as usize).min(num_bins - 1);
        conf_sum[idx] += conf;
        agree_sum[idx] += agree;
        count[idx] += 1;
    }
    let total = samples.len();
    let mean_confidence = (0..num_bins)
        .map(|i| (count[i] > 0).then(|| conf_sum[i] / count[i] as f64))
        .collect();
    let mean_agreement = (0..num_bins)
        .map(|i| (count[i] > 0).then(|| agree_sum[i] / count[i] as f64))
        .collect();
    let sample_fraction = (0..num_bins)
        .map(|i| {
            if total > 0 {
                count[i] as f64 / total as f64
            } else {
                0.0
            }
        })
        .collect();
    Ok(ReliabilityBins {
        kind,
        edges,
        mean_confidence,
        mean_agreement,
        sample_fraction,
    })
}

fn one_hot_bg() -> Vec<f64> {
    vec![1.0, 0.0]
}
