//! Annotation pre-processing: cluster multi-annotator boxes into per-object
//! groups and derive the reference targets used everywhere downstream.
//!
//! Clustering is greedy and multipartite: annotators are processed in
//! ascending id order, the first annotator's boxes seed the clusters, and each
//! later annotator's boxes are Hungarian-matched against the running cluster
//! mean boxes with cost 1 - IoU. Matches below the admission IoU are
//! discarded, and unmatched boxes seed new clusters.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::assignment::min_cost_assignment;
use crate::error::{Error, Result};
use crate::model::{iou, BBox, DatasetMeta, ImageAnnotations};
use crate::normal::central_interval_z;

/// One annotation inside a cluster, with its index into the image's
/// annotation list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMember {
    pub ann_index: usize,
    pub bbox: BBox,
    pub class_id: usize,
    pub annotator_id: usize,
}

/// Matched annotations of one object instance across annotators, plus the
/// derived training/evaluation targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationCluster {
    /// At most one member per annotator, sorted by annotator id.
    pub members: Vec<ClusterMember>,
    /// `J + 1` soft class label; entry 0 is the fraction of annotators that
    /// did not annotate this object.
    pub soft_label: Vec<f64>,
    pub mean_box: BBox,
    pub min_box: BBox,
    pub max_box: BBox,
    /// Fraction of annotators contributing to the cluster, |a| / K.
    pub annotator_certainty: f64,
    /// Per-coordinate target variance from the cluster spread.
    pub target_var: BBox,
}

/// Hungarian matching between two box lists with cost 1 - IoU.
///
/// Pairs whose IoU falls below `min_iou` are discarded after the assignment;
/// each index appears in at most one returned pair.
pub fn match_pair(set_a: &[BBox], set_b: &[BBox], min_iou: f64) -> Vec<(usize, usize)> {
    if set_a.is_empty() || set_b.is_empty() {
        return Vec::new();
    }
    let cost: Vec<Vec<f64>> = set_a
        .iter()
        .map(|a| set_b.iter().map(|b| 1.0 - iou(a, b)).collect())
        .collect();
    min_cost_assignment(&cost)
        .into_iter()
        .filter(|&(i, j)| iou(&set_a[i], &set_b[j]) >= min_iou)
        .collect()
}

/// Soft class probability target for a cluster: counts over classes divided
/// by K, with the background entry absorbing the non-annotating annotators.
pub fn soft_class_target(member_classes: &[usize], num_classes: usize, k: usize) -> Vec<f64> {
    debug_assert!(member_classes.len() <= k);
    let mut counts = vec![0usize; num_classes + 1];
    counts[0] = k - member_classes.len();
    for &c in member_classes {
        counts[c] += 1;
    }
    counts.iter().map(|&c| c as f64 / k as f64).collect()
}

/// Per-coordinate target variance from the cluster spread (min/max corners)
/// and the annotator certainty.
///
/// alpha = min(|a|/K, gamma); z = Phi^-1(1 - (1 - alpha)/2);
/// sigma_i = ((max_i - min_i) / (2 z))^2.
pub fn target_variance(
    min_box: &BBox,
    max_box: &BBox,
    member_count: usize,
    k: usize,
    gamma: f64,
) -> BBox {
    let alpha = member_count as f64 / k as f64;
    let z = central_interval_z(alpha, gamma);
    let mut out = [0.0; 4];
    for i in 0..4 {
        let spread = max_box[i] - min_box[i];
        if spread > 0.0 {
            out[i] = (spread / (2.0 * z)).powi(2);
        }
    }
    out
}

struct ClusterBuilder {
    members: Vec<ClusterMember>,
    mean: BBox,
}

impl ClusterBuilder {
    fn new(member: ClusterMember) -> Self {
        let mean = member.bbox;
        ClusterBuilder {
            members: vec![member],
            mean,
        }
    }

    fn push(&mut self, member: ClusterMember) {
        self.members.push(member);
        let n = self.members.len() as f64;
        for i in 0..4 {
            let sum: f64 = self.members.iter().map(|m| m.bbox[i]).sum();
            self.mean[i] = sum / n;
        }
    }

    fn finish(mut self, meta: &DatasetMeta, gamma: f64) -> AnnotationCluster {
        self.members.sort_by_key(|m| (m.annotator_id, m.ann_index));
        let k = meta.num_annotators;
        let classes: Vec<usize> = self.members.iter().map(|m| m.class_id).collect();
        let soft_label = soft_class_target(&classes, meta.num_classes, k);
        let mut min_box = self.members[0].bbox;
        let mut max_box = self.members[0].bbox;
        for m in &self.members[1..] {
            for i in 0..4 {
                min_box[i] = min_box[i].min(m.bbox[i]);
                max_box[i] = max_box[i].max(m.bbox[i]);
            }
        }
        let target_var = target_variance(&min_box, &max_box, self.members.len(), k, gamma);
        AnnotationCluster {
            annotator_certainty: self.members.len() as f64 / k as f64,
            soft_label,
            mean_box: self.mean,
            min_box,
            max_box,
            target_var,
            members: self.members,
        }
    }
}

/// Cluster one image's annotations into per-object groups.
///
/// Deterministic given the input: annotators are visited in ascending id, and
/// clusters are emitted in creation order. An image without annotations
/// yields an empty list.
pub fn cluster_annotations(
    image: &ImageAnnotations,
    meta: &DatasetMeta,
    min_iou: f64,
    gamma: f64,
) -> Vec<AnnotationCluster> {
    let mut by_annotator: BTreeMap<usize, Vec<ClusterMember>> = BTreeMap::new();
    for (ann_index, ann) in image.annotations.iter().enumerate() {
        by_annotator
            .entry(ann.annotator_id)
            .or_default()
            .push(ClusterMember {
                ann_index,
                bbox: ann.bbox,
                class_id: ann.class_id,
                annotator_id: ann.annotator_id,
            });
    }

    let mut clusters: Vec<ClusterBuilder> = Vec::new();
    for (_annotator, members) in by_annotator {
        if clusters.is_empty() {
            clusters.extend(members.into_iter().map(ClusterBuilder::new));
            continue;
        }
        let cluster_means: Vec<BBox> = clusters.iter().map(|c| c.mean).collect();
        let boxes: Vec<BBox> = members.iter().map(|m| m.bbox).collect();
        let pairs = match_pair(&cluster_means, &boxes, min_iou);
        let mut matched = vec![false; members.len()];
        for (ci, bi) in pairs {
            matched[bi] = true;
            clusters[ci].push(members[bi].clone());
        }
        for (bi, member) in members.into_iter().enumerate() {
            if !matched[bi] {
                clusters.push(ClusterBuilder::new(member));
            }
        }
    }

    clusters.into_iter().map(|c| c.finish(meta, gamma)).collect()
}

/// Nominal-metric Krippendorff's alpha over clustered annotations.
///
/// Units are clusters, coders are annotators, and values are class labels
/// with non-annotating annotators coded as background (class 0), so every
/// unit carries exactly K values. Returns `None` when there are fewer than
/// two pairable values overall (no clusters).
pub fn krippendorff_alpha(
    clustered: &[Vec<AnnotationCluster>],
    meta: &DatasetMeta,
) -> Option<f64> {
    let k = meta.num_annotators;
    let num_values = meta.num_classes + 1;
    if k < 2 {
        return None;
    }

    // Coincidence-matrix accumulation. With m_u = K values per unit, each
    // ordered pair of values within the unit contributes 1 / (K - 1).
    let mut value_totals = vec![0.0f64; num_values];
    let mut observed_disagreement = 0.0f64;
    let mut total_values = 0.0f64;
    for clusters in clustered {
        for cluster in clusters {
            let mut counts = vec![0usize; num_values];
            counts[0] = k - cluster.members.len();
            for m in &cluster.members {
                counts[m.class_id] += 1;
            }
            let pairable = (k - 1) as f64;
            for (v, &c) in counts.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                value_totals[v] += c as f64;
                // Ordered pairs (v, v') with v' != v inside this unit.
                observed_disagreement += c as f64 * (k - c) as f64 / pairable;
            }
            total_values += k as f64;
        }
    }

    if total_values < 2.0 {
        return None;
    }
    let expected_disagreement: f64 = {
        let sum_sq: f64 = value_totals.iter().map(|n| n * n).sum();
        (total_values * total_values - sum_sq) / (total_values - 1.0)
    };
    if expected_disagreement == 0.0 {
        // Every value in the dataset is identical: perfect agreement.
        return Some(1.0);
    }
    Some(1.0 - observed_disagreement / expected_disagreement)
}

/// Cluster every image of a dataset, preserving image order.
pub fn cluster_dataset(
    images: &[ImageAnnotations],
    meta: &DatasetMeta,
    min_iou: f64,
    gamma: f64,
) -> Vec<Vec<AnnotationCluster>> {
    images
        .iter()
        .map(|img| cluster_annotations(img, meta, min_iou, gamma))
        .collect()
}

/// Fail when the admission threshold is outside (0, 1].
pub fn validate_min_iou(min_iou: f64) -> Result<()> {
    if !(min_iou > 0.0 && min_iou <= 1.0) {
        return Err(Error::invalid(format!(
            "min_iou {min_iou} outside (0, 1]"
        )));
    }
    Ok(())
}
