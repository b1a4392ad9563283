//! Post-hoc calibration: weighted isotonic regression per class confidence
//! and per box-variance coordinate.
//!
//! Fitting runs the same clustering and matching as evaluation on a held-out
//! validation split, then regresses annotator agreement on predicted
//! confidence (one map per class) and cluster target variance on predicted
//! variance (one map per box coordinate), with the prediction certainty as
//! the sample weight. The bank therefore holds J + 4 maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{match_dataset, EvalOptions};
use crate::model::{argmax_foreground, DatasetMeta, ImageAnnotations, Prediction};

/// Input-axis scale used when interpolating between breakpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum XScale {
    #[default]
    Linear,
    /// Interpolate linearly in log(1 + x); the fitted values are unchanged
    /// (isotonic regression only depends on the input order).
    Log1p,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapDomain {
    UnitInterval,
    NonnegativeReals,
}

/// A fitted nondecreasing step-interpolant: linear between breakpoints,
/// constant beyond the observed range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicMap {
    /// Strictly ascending inputs.
    pub breakpoints: Vec<f64>,
    /// Nondecreasing fitted outputs, one per breakpoint.
    pub values: Vec<f64>,
    pub domain: MapDomain,
    #[serde(default)]
    pub x_scale: XScale,
}

impl IsotonicMap {
    /// Identity on the unit interval, used for classes with no training data.
    pub fn identity_unit() -> Self {
        IsotonicMap {
            breakpoints: vec![0.0, 1.0],
            values: vec![0.0, 1.0],
            domain: MapDomain::UnitInterval,
            x_scale: XScale::Linear,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.breakpoints.len();
        let raw = if x <= self.breakpoints[0] {
            self.values[0]
        } else if x >= self.breakpoints[n - 1] {
            self.values[n - 1]
        } else {
            // partition_point returns the first index with breakpoint > x.
            let hi = self.breakpoints.partition_point(|&b| b <= x);
            let lo = hi - 1;
            let (x0, x1) = (self.breakpoints[lo], self.breakpoints[hi]);
            let (y0, y1) = (self.values[lo], self.values[hi]);
            let frac = match self.x_scale {
                XScale::Linear => (x - x0) / (x1 - x0),
                XScale::Log1p => ((1.0 + x).ln() - (1.0 + x0).ln()) / ((1.0 + x1).ln() - (1.0 + x0).ln()),
            };
            y0 + frac * (y1 - y0)
        };
        match self.domain {
            MapDomain::UnitInterval => raw.clamp(0.0, 1.0),
            MapDomain::NonnegativeReals => raw.max(0.0),
        }
    }
}

/// Weighted isotonic regression by pool-adjacent-violators.
///
/// Minimizes `sum w_i (f(x_i) - y_i)^2` over nondecreasing `f`. Points
/// sharing an input are merged first (weighted mean target), and zero-weight
/// points are dropped; at least one positive weight is required.
pub fn fit_isotonic(
    xs: &[f64],
    ys: &[f64],
    weights: &[f64],
    domain: MapDomain,
) -> Result<IsotonicMap> {
    fit_isotonic_scaled(xs, ys, weights, domain, XScale::Linear)
}

pub fn fit_isotonic_scaled(
    xs: &[f64],
    ys: &[f64],
    weights: &[f64],
    domain: MapDomain,
    x_scale: XScale,
) -> Result<IsotonicMap> {
    if xs.is_empty() {
        return Err(Error::invalid("isotonic fit requires at least one point"));
    }
    if xs.len() != ys.len() || xs.len() != weights.len() {
        return Err(Error::invalid("isotonic fit: mismatched input lengths"));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::invalid("isotonic fit: weights must be >= 0"));
    }

    let mut points: Vec<(f64, f64, f64)> = xs
        .iter()
        .zip(ys)
        .zip(weights)
        .filter(|&((_, _), &w)| w > 0.0)
        .map(|((&x, &y), &w)| (x, y, w))
        .collect();
    if points.is_empty() {
        return Err(Error::invalid("isotonic fit: all weights are zero"));
    }
    points.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite inputs"));

    // Merge duplicate inputs into single weighted points.
    let mut grouped: Vec<(f64, f64, f64)> = Vec::with_capacity(points.len());
    for (x, y, w) in points {
        match grouped.last_mut() {
            Some(last) if last.0 == x => {
                let total = last.2 + w;
                last.1 = (last.1 * last.2 + y * w) / total;
                last.2 = total;
            }
            _ => grouped.push((x, y, w)),
        }
    }

    // Pool adjacent violators over the grouped sequence.
    struct Block {
        value: f64,
        weight: f64,
        len: usize,
    }
    let mut blocks: Vec<Block> = Vec::with_capacity(grouped.len());
    for &(_, y, w) in &grouped {
        let mut block = Block {
            value: y,
            weight: w,
            len: 1,
        };
        while let Some(prev) = blocks.last() {
            if prev.value <= block.value {
                break;
            }
            let prev = blocks.pop().unwrap();
            let total = prev.weight + block.weight;
            block.value = (prev.value * prev.weight + block.value * block.weight) / total;
            block.weight = total;
            block.len += prev.len;
        }
        blocks.push(block);
    }

    let breakpoints: Vec<f64> = grouped.iter().map(|&(x, _, _)| x).collect();
    let mut values = Vec::with_capacity(breakpoints.len());
    for block in &blocks {
        values.extend(std::iter::repeat_n(block.value, block.len));
    }
    Ok(IsotonicMap {
        breakpoints,
        values,
        domain,
        x_scale,
    })
}

/// Provenance and configuration snapshot of a fitted bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankFingerprint {
    pub num_val_images: usize,
    pub num_tp_pairs: usize,
    /// Classes that had no training points and fell back to identity maps.
    pub identity_classes: Vec<usize>,
    pub min_iou: f64,
    pub gamma: f64,
    pub var_floor: f64,
    pub var_log_space: bool,
}

/// J class-confidence maps plus 4 box-variance maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratorBank {
    pub classes: Vec<ClassMap>,
    pub box_coords: Vec<IsotonicMap>,
    pub fingerprint: BankFingerprint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMap {
    pub class_id: usize,
    #[serde(flatten)]
    pub map: IsotonicMap,
}

impl CalibratorBank {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_map(&self, class_id: usize) -> &IsotonicMap {
        &self.classes[class_id - 1].map
    }
}

/// How the non-predicted entries are adjusted after calibrating the argmax
/// class confidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RenormMode {
    /// Rescale the other entries by (1 - calibrated) / (1 - original) so the
    /// vector sums to one and their ratios are preserved.
    #[default]
    Proportional,
    /// Divide the other foreground entries by (1 - calibrated), then
    /// renormalize the whole vector; kept for compatibility.
    PrintedFormula,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub eval: EvalOptions,
    /// Fit the variance maps with log-scaled interpolation between
    /// breakpoints.
    pub var_log_space: bool,
}

/// Fit the J + 4 calibrators on a held-out validation split.
///
/// The validation set must be disjoint from any split the bank is later
/// evaluated on; that separation is the caller's responsibility.
pub fn fit_calibrator_bank(
    images: &[ImageAnnotations],
    predictions: &[Prediction],
    meta: &DatasetMeta,
    opts: &FitOptions,
) -> Result<CalibratorBank> {
    if images.is_empty() {
        return Err(Error::invalid("calibrator fit: empty validation set"));
    }
    let (evals, _) = match_dataset(images, predictions, meta, &opts.eval);

    let num_classes = meta.num_classes;
    let mut class_xs: Vec<Vec<f64>> = vec![Vec::new(); num_classes];
    let mut class_ys: Vec<Vec<f64>> = vec![Vec::new(); num_classes];
    let mut class_ws: Vec<Vec<f64>> = vec![Vec::new(); num_classes];
    let mut var_xs: [Vec<f64>; 4] = Default::default();
    let mut var_ys: [Vec<f64>; 4] = Default::default();
    let mut var_ws: [Vec<f64>; 4] = Default::default();

    let mut num_tp = 0usize;
    for eval in &evals {
        for &(pi, ci) in &eval.outcome.tp {
            let pred = &eval.preds[pi];
            let cluster = &eval.clusters[ci];
            num_tp += 1;
            for j in 1..=num_classes {
                class_xs[j - 1].push(pred.class_probs[j]);
                class_ys[j - 1].push(cluster.soft_label[j]);
                class_ws[j - 1].push(pred.certainty);
            }
            for i in 0..4 {
                var_xs[i].push(pred.var[i]);
                var_ys[i].push(cluster.target_var[i]);
                var_ws[i].push(pred.certainty);
            }
        }
    }
    if num_tp == 0 {
        return Err(Error::invalid(
            "calibrator fit: no matched prediction-cluster pairs in the validation set",
        ));
    }

    let mut identity_classes = Vec::new();
    let mut classes = Vec::with_capacity(num_classes);
    for j in 1..=num_classes {
        let idx = j - 1;
        let usable = class_ws[idx].iter().any(|&w| w > 0.0);
        let map = if usable {
            fit_isotonic(&class_xs[idx], &class_ys[idx], &class_ws[idx], MapDomain::UnitInterval)?
        } else {
            identity_classes.push(j);
            IsotonicMap::identity_unit()
        };
        classes.push(ClassMap { class_id: j, map });
    }

    let scale = if opts.var_log_space {
        XScale::Log1p
    } else {
        XScale::Linear
    };
    let mut box_coords = Vec::with_capacity(4);
    for i in 0..4 {
        box_coords.push(fit_isotonic_scaled(
            &var_xs[i],
            &var_ys[i],
            &var_ws[i],
            MapDomain::NonnegativeReals,
            scale,
        )?);
    }

    Ok(CalibratorBank {
        classes,
        box_coords,
        fingerprint: BankFingerprint {
            num_val_images: images.len(),
            num_tp_pairs: num_tp,
            identity_classes,
            min_iou: opts.eval.min_iou,
            gamma: opts.eval.gamma,
            var_floor: opts.eval.var_floor,
            var_log_space: opts.var_log_space,
        },
    })
}

/// Calibrate the argmax foreground class and rescale the remaining entries so
/// the vector still sums to one.
pub fn apply_class_calibration(probs: &[f64], bank: &CalibratorBank, mode: RenormMode) -> Vec<f64> {
    let j = argmax_foreground(probs);
    let original = probs[j];
    let calibrated = bank.class_map(j).eval(original);
    let mut out = probs.to_vec();
    out[j] = calibrated;
    match mode {
        RenormMode::Proportional => {
            if original >= 1.0 {
                // No mass elsewhere to rescale; background absorbs the rest.
                for (c, v) in out.iter_mut().enumerate() {
                    if c != j {
                        *v = 0.0;
                    }
                }
                out[0] = 1.0 - calibrated;
            } else {
                let factor = (1.0 - calibrated) / (1.0 - original);
                for (c, v) in out.iter_mut().enumerate() {
                    if c != j {
                        *v *= factor;
                    }
                }
            }
        }
        RenormMode::PrintedFormula => {
            if calibrated < 1.0 {
                for (c, v) in out.iter_mut().enumerate().skip(1) {
                    if c != j {
                        *v /= 1.0 - calibrated;
                    }
                }
            }
            crate::model::normalize_class_probs(&mut out);
        }
    }
    out
}

/// Apply the per-coordinate variance maps.
pub fn apply_variance_calibration(var: &[f64; 4], bank: &CalibratorBank) -> [f64; 4] {
    [
        bank.box_coords[0].eval(var[0]),
        bank.box_coords[1].eval(var[1]),
        bank.box_coords[2].eval(var[2]),
        bank.box_coords[3].eval(var[3]),
    ]
}

/// Calibrate a batch of predictions: class probabilities and variances
/// change, means and certainties stay untouched.
pub fn calibrate_predictions(
    preds: &[Prediction],
    bank: &CalibratorBank,
    mode: RenormMode,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(preds.len());
    for pred in preds {
        if pred.class_probs.len() != bank.num_classes() + 1 {
            return Err(Error::invalid(format!(
                "bank has {} classes but prediction carries {} probabilities",
                bank.num_classes(),
                pred.class_probs.len()
            )));
        }
        let mut p = pred.clone();
        p.class_probs = apply_class_calibration(&pred.class_probs, bank, mode);
        p.var = apply_variance_calibration(&pred.var, bank);
        out.push(p);
    }
    Ok(out)
}
