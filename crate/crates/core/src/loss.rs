//! Train-time calibration objective as a pure value-and-gradient oracle.
//!
//! The loss per matched (cluster, prediction) pair is
//! `l_total = lambda * l_reg + l_cls`, where the classification term is
//! cross-entropy against the cluster's soft label and the regression term is
//! the L1 distance between the predicted Gaussian moments and the cluster
//! targets. An external training framework can diff its values against this
//! module; the gradients support desk-scale optimization tests.

use serde::{Deserialize, Serialize};

use crate::model::Prediction;
use crate::preprocess::AnnotationCluster;

pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_LOG_EPS: f64 = 1e-12;

/// How the background entry of the soft label enters the classification loss,
/// mirroring the architecture variants (R-CNN / YOLO / RetinaNet style).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundMode {
    /// Background stays a regular class in the cross-entropy sum.
    #[default]
    Keep,
    /// Background is dropped; only foreground terms are summed.
    Drop,
    /// Background is converted to an objectness target `1 - t0`, trained as
    /// binary cross-entropy on the prediction certainty, plus the foreground
    /// cross-entropy.
    Objectness,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLoss {
    pub pair_index: usize,
    pub l_cls: f64,
    pub l_reg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_total: f64,
    pub lambda: f64,
    pub per_pair: Vec<PairLoss>,
}

/// Cross-entropy of a predicted distribution against a soft target, summed
/// over all `J + 1` entries including background.
pub fn classification_loss(t: &[f64], p: &[f64], eps: f64) -> f64 {
    debug_assert_eq!(t.len(), p.len());
    -t.iter()
        .zip(p)
        .map(|(ti, pi)| ti * pi.max(eps).ln())
        .sum::<f64>()
}

fn classification_loss_mode(
    t: &[f64],
    p: &[f64],
    certainty: f64,
    mode: BackgroundMode,
    eps: f64,
) -> f64 {
    match mode {
        BackgroundMode::Keep => classification_loss(t, p, eps),
        BackgroundMode::Drop => -t[1..]
            .iter()
            .zip(&p[1..])
            .map(|(ti, pi)| ti * pi.max(eps).ln())
            .sum::<f64>(),
        BackgroundMode::Objectness => {
            let fg = -t[1..]
                .iter()
                .zip(&p[1..])
                .map(|(ti, pi)| ti * pi.max(eps).ln())
                .sum::<f64>();
            let target = 1.0 - t[0];
            let bce = -(target * certainty.max(eps).ln()
                + (1.0 - target) * (1.0 - certainty).max(eps).ln());
            fg + bce
        }
    }
}

/// L1 distance between predicted and target box moments (mean and diagonal
/// variance).
pub fn regression_loss(
    mean_box: &[f64; 4],
    target_var: &[f64; 4],
    pred_mean: &[f64; 4],
    pred_var: &[f64; 4],
) -> f64 {
    let mut total = 0.0;
    for i in 0..4 {
        total += (mean_box[i] - pred_mean[i]).abs();
        total += (target_var[i] - pred_var[i]).abs();
    }
    total
}

/// Mean loss over matched pairs. The pairing is supplied by the caller (the
/// base detector's matcher during real training, `evalmatch` in desk tests).
///
/// An empty pairing yields a zero loss with an empty per-pair list.
pub fn image_loss(
    clusters: &[AnnotationCluster],
    preds: &[Prediction],
    pairs: &[(usize, usize)],
    lambda: f64,
    mode: BackgroundMode,
    eps: f64,
) -> LossBreakdown {
    let mut per_pair = Vec::with_capacity(pairs.len());
    let mut cls_sum = 0.0;
    let mut reg_sum = 0.0;
    for (pair_index, &(ci, pi)) in pairs.iter().enumerate() {
        let cluster = &clusters[ci];
        let pred = &preds[pi];
        let l_cls = classification_loss_mode(
            &cluster.soft_label,
            &pred.class_probs,
            pred.certainty,
            mode,
            eps,
        );
        let l_reg = regression_loss(&cluster.mean_box, &cluster.target_var, &pred.mean, &pred.var);
        cls_sum += l_cls;
        reg_sum += l_reg;
        per_pair.push(PairLoss {
            pair_index,
            l_cls,
            l_reg,
        });
    }
    let n = pairs.len().max(1) as f64;
    let l_cls = cls_sum / n;
    let l_reg = reg_sum / n;
    LossBreakdown {
        l_cls,
        l_reg,
        l_total: lambda * l_reg + l_cls,
        lambda,
        per_pair,
    }
}

/// Per-pair analytic (sub)gradients of the mean image loss.
///
/// L1 kinks use the convention sign(0) = 0. The class-probability gradient is
/// taken with respect to softmax logits, where it reduces to `p - t` scaled
/// by the pair weight (`Drop`/`Objectness` modes zero the background target).
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub wrt_pred_mean: Vec<[f64; 4]>,
    pub wrt_pred_var: Vec<[f64; 4]>,
    pub wrt_class_logits: Vec<Vec<f64>>,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn loss_gradient(
    clusters: &[AnnotationCluster],
    preds: &[Prediction],
    pairs: &[(usize, usize)],
    lambda: f64,
    mode: BackgroundMode,
) -> LossGradients {
    let scale = 1.0 / pairs.len().max(1) as f64;
    let mut wrt_pred_mean = Vec::with_capacity(pairs.len());
    let mut wrt_pred_var = Vec::with_capacity(pairs.len());
    let mut wrt_class_logits = Vec::with_capacity(pairs.len());
    for &(ci, pi) in pairs {
        let cluster = &clusters[ci];
        let pred = &preds[pi];
        let mut g_mean = [0.0; 4];
        let mut g_var = [0.0; 4];
        for i in 0..4 {
            g_mean[i] = scale * lambda * sign(pred.mean[i] - cluster.mean_box[i]);
            g_var[i] = scale * lambda * sign(pred.var[i] - cluster.target_var[i]);
        }
        let p = &pred.class_probs;
        let t = &cluster.soft_label;
        let g_logits: Vec<f64> = match mode {
            BackgroundMode::Keep => (0..p.len()).map(|j| scale * (p[j] - t[j])).collect(),
            BackgroundMode::Drop | BackgroundMode::Objectness => {
                let fg_mass = 1.0 - t[0];
                (0..p.len())
                    .map(|j| {
                        let tj = if j == 0 { 0.0 } else { t[j] };
                        scale * (fg_mass * p[j] - tj)
                    })
                    .collect()
            }
        };
        wrt_pred_mean.push(g_mean);
        wrt_pred_var.push(g_var);
        wrt_class_logits.push(g_logits);
    }
    LossGradients {
        wrt_pred_mean,
        wrt_pred_var,
        wrt_class_logits,
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
