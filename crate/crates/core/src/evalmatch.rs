//! Evaluation-time matching of predictions to annotation clusters.
//!
//! The assignment cost is the mean squared Mahalanobis distance between the
//! cluster's member boxes and the predicted box distribution (diagonal
//! covariance). Assigned pairs whose mean boxes do not overlap at all are
//! voided: the prediction counts as a false positive and the cluster as a
//! false negative.

use serde::{Deserialize, Serialize};

use crate::model::{iou, Prediction};
use crate::preprocess::AnnotationCluster;

/// How the zero-IoU guard is enforced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ZeroIouGuard {
    /// Run the assignment on raw costs, then void zero-overlap pairs.
    #[default]
    VoidAfterAssignment,
    /// Give zero-overlap pairs a prohibitive cost up front; pairs that are
    /// still forced (more predictions than overlapping clusters) are voided.
    ForbidInCost,
}

const FORBIDDEN_COST: f64 = 1e15;

/// TP/FP/FN bookkeeping for one image (or a pooled dataset).
///
/// `tp` holds `(prediction index, cluster index)` pairs; together with `fp`
/// it covers every prediction exactly once, and together with `fn_` every
/// cluster exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub tp: Vec<(usize, usize)>,
    pub fp: Vec<usize>,
    #[serde(rename = "fn")]
    pub fn_: Vec<usize>,
}

/// Mean squared Mahalanobis distance between a cluster's member boxes and a
/// predicted Gaussian with diagonal covariance, normalized by K.
///
/// Variances are floored at `var_floor` so zero-variance predictions stay
/// finite.
pub fn mahalanobis_cost(
    cluster: &AnnotationCluster,
    pred: &Prediction,
    k: usize,
    var_floor: f64,
) -> f64 {
    let mut total = 0.0;
    for member in &cluster.members {
        for i in 0..4 {
            let d = member.bbox[i] - pred.mean[i];
            total += d * d / pred.var[i].max(var_floor);
        }
    }
    total / k as f64
}

/// Match predictions to clusters for one image.
pub fn match_predictions(
    clusters: &[AnnotationCluster],
    preds: &[Prediction],
    k: usize,
    var_floor: f64,
    guard: ZeroIouGuard,
) -> MatchOutcome {
    let overlap = |c: &AnnotationCluster, p: &Prediction| iou(&c.mean_box, &p.mean) > 0.0;

    let cost: Vec<Vec<f64>> = clusters
        .iter()
        .map(|c| {
            preds
                .iter()
                .map(|p| {
                    let base = mahalanobis_cost(c, p, k, var_floor);
                    match guard {
                        ZeroIouGuard::VoidAfterAssignment => base,
                        ZeroIouGuard::ForbidInCost => {
                            if overlap(c, p) {
                                base
                            } else {
                                FORBIDDEN_COST
                            }
                        }
                    }
                })
                .collect()
        })
        .collect();

    let assigned = crate::assignment::min_cost_assignment(&cost);

    let mut cluster_matched = vec![false; clusters.len()];
    let mut pred_matched = vec![false; preds.len()];
    let mut tp = Vec::new();
    for (ci, pi) in assigned {
        if overlap(&clusters[ci], &preds[pi]) {
            cluster_matched[ci] = true;
            pred_matched[pi] = true;
            tp.push((pi, ci));
        }
        // A zero-overlap assignment is voided: FP + FN.
    }
    tp.sort_unstable();
    let fp = (0..preds.len()).filter(|&i| !pred_matched[i]).collect();
    let fn_ = (0..clusters.len()).filter(|&i| !cluster_matched[i]).collect();
    MatchOutcome { tp, fp, fn_ }
}
