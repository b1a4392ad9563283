//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line. Run with `cargo test -p adcal --test acceptance --
//! --nocapture` to see the lines.

use std::time::Instant;

use adcal::evalmatch::{match_predictions, ZeroIouGuard};
use adcal::loss::{image_loss, loss_gradient, softmax, BackgroundMode};
use adcal::metrics::{aggregate_mean, evaluate_dataset, EvalOptions};
use adcal::model::{iou, Annotation, BBox, CertaintySource, DatasetMeta, ImageAnnotations, Prediction};
use adcal::posthoc::{
    calibrate_predictions, fit_calibrator_bank, fit_isotonic, FitOptions, MapDomain, RenormMode,
};
use adcal::preprocess::{
    cluster_annotations, cluster_dataset, krippendorff_alpha, match_pair, AnnotationCluster,
    ClusterMember,
};
use adcal::simulate::{
    simulate_dataset, simulate_predictions, AnnotatorProfile, Miscalibration, ObjectSize,
    ObjectsPerImage, SimulationConfig,
};

fn report(name: &str, pass: bool, details: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("[acceptance] {name}: {verdict} ({details})");
    assert!(pass, "{name}: {details}");
}

struct Lcg(u64);

impl Lcg {
    fn next_f64(&mut self) -> f64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }

    fn below(&mut self, n: usize) -> usize {
        (self.next_f64() * n as f64) as usize % n
    }
}

// ---------------------------------------------------------------------------
// Shared synthetic configs (documented seeds)
// ---------------------------------------------------------------------------

/// Closed-loop dataset: class-label noise only, geometry noiseless, so the
/// oracle detector is an exact fixpoint of every metric.
fn closed_loop_config() -> SimulationConfig {
    SimulationConfig {
        seed: 20_240_601,
        num_images: 1000,
        objects_per_image: ObjectsPerImage { min: 1, max: 5 },
        num_classes: 10,
        image_width: 640.0,
        image_height: 640.0,
        object_size: ObjectSize {
            min_frac: 0.05,
            max_frac: 0.18,
        },
        profiles: (1..=5)
            .map(|annotator_id| AnnotatorProfile {
                annotator_id,
                class_accuracy: if annotator_id == 1 { 0.74 } else { 0.55 },
                miss_rate: 0.0,
                box_jitter_sigma: 0.0,
                spurious_rate: 0.0,
            })
            .collect(),
    }
}

/// High-disagreement dataset with geometric noise, for the miscalibration
/// ordering and the post-hoc improvement criteria.
fn noisy_config() -> SimulationConfig {
    SimulationConfig {
        seed: 20_240_602,
        num_images: 800,
        objects_per_image: ObjectsPerImage { min: 1, max: 4 },
        num_classes: 10,
        image_width: 640.0,
        image_height: 640.0,
        object_size: ObjectSize {
            min_frac: 0.06,
            max_frac: 0.16,
        },
        profiles: (1..=5)
            .map(|annotator_id| AnnotatorProfile {
                annotator_id,
                class_accuracy: 0.5,
                miss_rate: 0.7,
                box_jitter_sigma: 0.02,
                spurious_rate: 0.0,
            })
            .collect(),
    }
}

fn oracle_eval(
    config: &SimulationConfig,
    mis: &Miscalibration,
) -> (Vec<ImageAnnotations>, Vec<Prediction>, DatasetMeta) {
    let (_, images) = simulate_dataset(config).unwrap();
    let meta = config.meta();
    let clustered: Vec<(String, Vec<AnnotationCluster>)> = images
        .iter()
        .map(|img| {
            (
                img.image_id.clone(),
                cluster_annotations(img, &meta, 0.5, 0.999),
            )
        })
        .collect();
    let preds = simulate_predictions(&clustered, mis);
    (images, preds, meta)
}

// ---------------------------------------------------------------------------
// Criterion: assignment oracle
// ---------------------------------------------------------------------------

/// Exhaustive minimum over all injective row -> column maps.
fn brute_min_assignment(cost: &[Vec<f64>]) -> (Vec<(usize, usize)>, f64) {
    let rows = cost.len();
    let cols = if rows == 0 { 0 } else { cost[0].len() };
    if rows == 0 || cols == 0 {
        return (Vec::new(), 0.0);
    }
    fn recurse(
        row: usize,
        cost: &[Vec<f64>],
        taken: &mut Vec<bool>,
        chosen: &mut Vec<Option<usize>>,
        acc: f64,
        remaining: usize,
        best: &mut Option<(Vec<(usize, usize)>, f64)>,
    ) {
        let rows = cost.len();
        if row == rows || remaining == 0 {
            if best.as_ref().is_none_or(|(_, c)| acc < *c) {
                let pairs = chosen
                    .iter()
                    .enumerate()
                    .filter_map(|(r, c)| c.map(|c| (r, c)))
                    .collect();
                *best = Some((pairs, acc));
            }
            return;
        }
        // When rows > cols some rows stay unassigned; try skipping only when
        // there are more rows left than columns.
        let rows_left = rows - row;
        if rows_left > remaining {
            chosen[row] = None;
            recurse(row + 1, cost, taken, chosen, acc, remaining, best);
        }
        for col in 0..cost[0].len() {
            if !taken[col] {
                taken[col] = true;
                chosen[row] = Some(col);
                recurse(row + 1, cost, taken, chosen, acc + cost[row][col], remaining - 1, best);
                chosen[row] = None;
                taken[col] = false;
            }
        }
    }
    let assignable = rows.min(cols);
    let mut best = None;
    recurse(
        0,
        cost,
        &mut vec![false; cols],
        &mut vec![None; rows],
        0.0,
        assignable,
        &mut best,
    );
    best.unwrap()
}

fn random_box(rng: &mut Lcg, span: f64) -> BBox {
    let x = rng.next_f64() * span;
    let y = rng.next_f64() * span;
    let w = 5.0 + rng.next_f64() * 30.0;
    let h = 5.0 + rng.next_f64() * 30.0;
    [x, y, x + w, y + h]
}

fn random_cluster(rng: &mut Lcg, k: usize) -> AnnotationCluster {
    let base = random_box(rng, 80.0);
    let members: Vec<ClusterMember> = (1..=1 + rng.below(k))
        .map(|annotator_id| {
            let mut bbox = base;
            for v in bbox.iter_mut() {
                *v += rng.next_f64() * 4.0 - 2.0;
            }
            ClusterMember {
                ann_index: annotator_id - 1,
                bbox,
                class_id: 1,
                annotator_id,
            }
        })
        .collect();
    let mut mean = [0.0; 4];
    for (i, m) in mean.iter_mut().enumerate() {
        *m = members.iter().map(|mem| mem.bbox[i]).sum::<f64>() / members.len() as f64;
    }
    AnnotationCluster {
        annotator_certainty: members.len() as f64 / k as f64,
        soft_label: vec![1.0 - members.len() as f64 / k as f64, members.len() as f64 / k as f64],
        mean_box: mean,
        min_box: mean,
        max_box: mean,
        target_var: [1.0; 4],
        members,
    }
}

#[test]
fn assignment_oracle() {
    let start = Instant::now();
    let mut rng = Lcg(0xacce_0001);
    let k = 4;
    let mut mismatches = 0usize;

    // match_pair against brute force on the 1 - IoU cost.
    for _ in 0..250 {
        let n = 1 + rng.below(6);
        let m = 1 + rng.below(6);
        let a: Vec<BBox> = (0..n).map(|_| random_box(&mut rng, 60.0)).collect();
        let b: Vec<BBox> = (0..m).map(|_| random_box(&mut rng, 60.0)).collect();
        let got = match_pair(&a, &b, 0.5);
        let cost: Vec<Vec<f64>> = a
            .iter()
            .map(|x| b.iter().map(|y| 1.0 - iou(x, y)).collect())
            .collect();
        let (brute, _) = brute_min_assignment(&cost);
        let want: Vec<(usize, usize)> = brute
            .into_iter()
            .filter(|&(i, j)| iou(&a[i], &b[j]) >= 0.5)
            .collect();
        let mut got_sorted = got.clone();
        got_sorted.sort_unstable();
        let mut want_sorted = want.clone();
        want_sorted.sort_unstable();
        if got_sorted != want_sorted {
            mismatches += 1;
        }
    }

    // match_predictions against brute force with the same voiding rule.
    for _ in 0..250 {
        let n_clusters = 1 + rng.below(6);
        let n_preds = 1 + rng.below(6);
        let clusters: Vec<AnnotationCluster> =
            (0..n_clusters).map(|_| random_cluster(&mut rng, k)).collect();
        let preds: Vec<Prediction> = (0..n_preds)
            .map(|_| Prediction {
                image_id: "img".into(),
                mean: random_box(&mut rng, 80.0),
                var: [0.5 + rng.next_f64() * 10.0; 4],
                class_probs: vec![0.5, 0.5],
                certainty: rng.next_f64(),
            })
            .collect();
        let got = match_predictions(&clusters, &preds, k, 1e-6, ZeroIouGuard::VoidAfterAssignment);

        let cost: Vec<Vec<f64>> = clusters
            .iter()
            .map(|c| {
                preds
                    .iter()
                    .map(|p| adcal::evalmatch::mahalanobis_cost(c, p, k, 1e-6))
                    .collect()
            })
            .collect();
        let (brute, brute_cost) = brute_min_assignment(&cost);
        let mut tp: Vec<(usize, usize)> = brute
            .iter()
            .filter(|&&(ci, pi)| iou(&clusters[ci].mean_box, &preds[pi].mean) > 0.0)
            .map(|&(ci, pi)| (pi, ci))
            .collect();
        tp.sort_unstable();
        if got.tp != tp {
            mismatches += 1;
        }
        // Pre-voiding optimal total must agree as well.
        let jv = adcal::assignment::min_cost_assignment(&cost);
        let jv_cost = adcal::assignment::assignment_cost(&cost, &jv);
        if (jv_cost - brute_cost).abs() > 1e-9 * brute_cost.max(1.0) {
            mismatches += 1;
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    report(
        "assignment-oracle",
        mismatches == 0 && elapsed < 10.0,
        &format!("500 instances, {mismatches} mismatches, {elapsed:.2}s"),
    );
}

// ---------------------------------------------------------------------------
// Criterion: PAVA oracle
// ---------------------------------------------------------------------------

/// Brute-force isotonic projection: enumerate contiguous-block partitions,
/// keep those whose block weighted means are nondecreasing, take the best.
fn brute_isotonic_objective(ys: &[f64], ws: &[f64]) -> f64 {
    let n = ys.len();
    let mut best = f64::INFINITY;
    for mask in 0..(1u32 << (n - 1)) {
        let mut blocks = Vec::new();
        let mut start = 0usize;
        for i in 0..n - 1 {
            if mask & (1 << i) != 0 {
                blocks.push((start, i + 1));
                start = i + 1;
            }
        }
        blocks.push((start, n));
        let means: Vec<f64> = blocks
            .iter()
            .map(|&(a, b)| {
                let w: f64 = ws[a..b].iter().sum();
                ys[a..b].iter().zip(&ws[a..b]).map(|(y, w)| y * w).sum::<f64>() / w
            })
            .collect();
        if means.windows(2).any(|m| m[0] > m[1]) {
            continue;
        }
        let mut obj = 0.0;
        for (bi, &(a, b)) in blocks.iter().enumerate() {
            for i in a..b {
                obj += ws[i] * (ys[i] - means[bi]).powi(2);
            }
        }
        best = best.min(obj);
    }
    best
}

#[test]
fn pava_oracle() {
    let start = Instant::now();
    let mut rng = Lcg(0xacce_0002);
    let mut worst_rel = 0.0f64;
    for _ in 0..200 {
        let n = 2 + rng.below(11);
        let xs: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
        let ws: Vec<f64> = (0..n).map(|_| 0.05 + rng.next_f64()).collect();
        let map = fit_isotonic(&xs, &ys, &ws, MapDomain::UnitInterval).unwrap();
        let fitted: f64 = (0..n)
            .map(|i| ws[i] * (ys[i] - map.eval(xs[i])).powi(2))
            .sum();
        let oracle = brute_isotonic_objective(&ys, &ws);
        let rel = (fitted - oracle).abs() / oracle.max(1e-12);
        worst_rel = worst_rel.max(rel);
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "pava-oracle",
        worst_rel <= 1e-9 && elapsed < 10.0,
        &format!("200 instances, worst relative error {worst_rel:.2e}, {elapsed:.2}s"),
    );
}

// ---------------------------------------------------------------------------
// Criterion: gradient check
// ---------------------------------------------------------------------------

#[test]
fn gradient_check() {
    let mut rng = Lcg(0xacce_0003);
    let h = 1e-5;
    let mut worst_rel = 0.0f64;
    for _ in 0..100 {
        let mean_box = [
            rng.next_f64() * 40.0,
            rng.next_f64() * 40.0,
            60.0 + rng.next_f64() * 40.0,
            60.0 + rng.next_f64() * 40.0,
        ];
        let target_var = [
            1.0 + rng.next_f64() * 8.0,
            1.0 + rng.next_f64() * 8.0,
            1.0 + rng.next_f64() * 8.0,
            1.0 + rng.next_f64() * 8.0,
        ];
        let mut soft = vec![
            0.05 + rng.next_f64(),
            0.05 + rng.next_f64(),
            0.05 + rng.next_f64(),
            0.05 + rng.next_f64(),
        ];
        let s: f64 = soft.iter().sum();
        soft.iter_mut().for_each(|v| *v /= s);
        let cluster = AnnotationCluster {
            members: vec![],
            soft_label: soft,
            mean_box,
            min_box: mean_box,
            max_box: mean_box,
            annotator_certainty: 0.6,
            target_var,
        };
        // Stay away from the L1 kinks: offsets of at least 1 in mean, 0.5 in var.
        let logits: Vec<f64> = (0..4).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
        let pred = Prediction {
            image_id: "img".into(),
            mean: [
                mean_box[0] + 1.0 + rng.next_f64() * 4.0,
                mean_box[1] - 1.0 - rng.next_f64() * 4.0,
                mean_box[2] + 1.0 + rng.next_f64() * 4.0,
                mean_box[3] - 1.0 - rng.next_f64() * 4.0,
            ],
            var: [
                target_var[0] + 0.5 + rng.next_f64(),
                target_var[1] + 0.5 + rng.next_f64(),
                target_var[2] + 0.5 + rng.next_f64(),
                target_var[3] + 0.5 + rng.next_f64(),
            ],
            class_probs: softmax(&logits),
            certainty: 0.7,
        };
        let lambda = 0.1;
        let clusters = vec![cluster];
        let grads = loss_gradient(&clusters, std::slice::from_ref(&pred), &[(0, 0)], lambda, BackgroundMode::Keep);
        let value = |p: &Prediction| {
            image_loss(&clusters, std::slice::from_ref(p), &[(0, 0)], lambda, BackgroundMode::Keep, 1e-12)
                .l_total
        };
        for i in 0..4 {
            let mut hi = pred.clone();
            hi.mean[i] += h;
            let mut lo = pred.clone();
            lo.mean[i] -= h;
            let fd = (value(&hi) - value(&lo)) / (2.0 * h);
            let rel = (fd - grads.wrt_pred_mean[0][i]).abs() / fd.abs().max(1e-8);
            worst_rel = worst_rel.max(rel);

            let mut hi = pred.clone();
            hi.var[i] += h;
            let mut lo = pred.clone();
            lo.var[i] -= h;
            let fd = (value(&hi) - value(&lo)) / (2.0 * h);
            let rel = (fd - grads.wrt_pred_var[0][i]).abs() / fd.abs().max(1e-8);
            worst_rel = worst_rel.max(rel);
        }
        for j in 0..logits.len() {
            let mut zh = logits.clone();
            zh[j] += h;
            let mut zl = logits.clone();
            zl[j] -= h;
            let mut ph = pred.clone();
            ph.class_probs = softmax(&zh);
            let mut pl = pred.clone();
            pl.class_probs = softmax(&zl);
            let fd = (value(&ph) - value(&pl)) / (2.0 * h);
            let rel = (fd - grads.wrt_class_logits[0][j]).abs() / fd.abs().max(1e-2);
            worst_rel = worst_rel.max(rel);
        }
    }
    report(
        "gradient-check",
        worst_rel <= 1e-4,
        &format!("100 random non-kink points, max relative error {worst_rel:.2e}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion: oracle closed loop
// ---------------------------------------------------------------------------

#[test]
fn oracle_closed_loop() {
    let start = Instant::now();
    let config = closed_loop_config();
    let (images, preds, meta) = oracle_eval(&config, &Miscalibration::default());
    let reportv = evaluate_dataset(&images, &preds, &meta, &EvalOptions::default());
    let elapsed = start.elapsed().as_secs_f64();
    let lue = reportv.lue.unwrap_or(1.0);
    let pass = reportv.tvd <= 0.01
        && reportv.tvd_fp == 0.0
        && reportv.fne == 0.0
        && lue <= 0.02
        && elapsed < 60.0;
    report(
        "oracle-closed-loop",
        pass,
        &format!(
            "1000 images seed {}: tvd {:.4}, tvd_fp {:.4}, lue {:.4}, fne {:.4}, {:.1}s",
            config.seed, reportv.tvd, reportv.tvd_fp, lue, reportv.fne, elapsed
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion: miscalibration ordering
// ---------------------------------------------------------------------------

#[test]
fn miscalibration_ordering() {
    let config = noisy_config();
    let mut tvd_by_beta = Vec::new();
    for beta in [0.25, 0.5, 1.0] {
        let mis = Miscalibration {
            confidence_exponent: beta,
            variance_scale: 1.0,
            var_floor: 1e-6,
        };
        let (images, preds, meta) = oracle_eval(&config, &mis);
        let r = evaluate_dataset(&images, &preds, &meta, &EvalOptions::default());
        tvd_by_beta.push(r.tvd);
    }
    let mut lue_by_scale = Vec::new();
    for scale in [4.0, 1.0] {
        let mis = Miscalibration {
            confidence_exponent: 1.0,
            variance_scale: scale,
            var_floor: 1e-6,
        };
        let (images, preds, meta) = oracle_eval(&config, &mis);
        let r = evaluate_dataset(&images, &preds, &meta, &EvalOptions::default());
        lue_by_scale.push(r.lue.unwrap());
    }
    let pass = tvd_by_beta[0] > tvd_by_beta[1]
        && tvd_by_beta[1] > tvd_by_beta[2]
        && lue_by_scale[0] > lue_by_scale[1];
    report(
        "miscalibration-ordering",
        pass,
        &format!(
            "tvd(beta=0.25) {:.4} > tvd(0.5) {:.4} > tvd(1) {:.4}; lue(s=4) {:.4} > lue(s=1) {:.4}",
            tvd_by_beta[0], tvd_by_beta[1], tvd_by_beta[2], lue_by_scale[0], lue_by_scale[1]
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion: post-hoc improvement
// ---------------------------------------------------------------------------

#[test]
fn posthoc_improvement() {
    let start = Instant::now();
    let config = noisy_config();
    let mis = Miscalibration {
        confidence_exponent: 0.5,
        variance_scale: 4.0,
        var_floor: 1e-6,
    };
    let (images, preds, meta) = oracle_eval(&config, &mis);
    let split = images.len() / 2;
    let (val_images, test_images) = images.split_at(split);
    let test_ids: std::collections::BTreeSet<&str> =
        test_images.iter().map(|i| i.image_id.as_str()).collect();
    let val_preds: Vec<Prediction> = preds
        .iter()
        .filter(|p| !test_ids.contains(p.image_id.as_str()))
        .cloned()
        .collect();
    let test_preds: Vec<Prediction> = preds
        .iter()
        .filter(|p| test_ids.contains(p.image_id.as_str()))
        .cloned()
        .collect();

    let bank = fit_calibrator_bank(val_images, &val_preds, &meta, &FitOptions::default()).unwrap();
    let calibrated = calibrate_predictions(&test_preds, &bank, RenormMode::Proportional).unwrap();

    let opts = EvalOptions::default();
    let before = evaluate_dataset(test_images, &test_preds, &meta, &opts);
    let after = evaluate_dataset(test_images, &calibrated, &meta, &opts);
    let tvd_gain = (before.tvd - after.tvd) / before.tvd;
    let elapsed = start.elapsed().as_secs_f64();
    let pass = after.mean < before.mean && tvd_gain >= 0.25 && elapsed < 120.0;
    report(
        "posthoc-improvement",
        pass,
        &format!(
            "mean {:.4} -> {:.4}, tvd {:.4} -> {:.4} ({:.0}% relative), lue {:.4} -> {:.4}, {:.1}s",
            before.mean,
            after.mean,
            before.tvd,
            after.tvd,
            tvd_gain * 100.0,
            before.lue.unwrap(),
            after.lue.unwrap(),
            elapsed
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion: quantile spot values
// ---------------------------------------------------------------------------

#[test]
fn quantile_spot_values() {
    // Reference values computed independently with a series CDF inverted by
    // bisection (see normal.rs tests); frozen here.
    let z_gamma = adcal::normal::central_interval_z(1.0, 0.999);
    let z_half = adcal::normal::central_interval_z(0.5, 0.999);
    let err_gamma = (z_gamma - 3.29053).abs();
    let err_half = (z_half - 0.67449).abs();
    report(
        "quantile-spot-values",
        err_gamma <= 1e-4 && err_half <= 1e-4,
        &format!("z(0.999 clamp) err {err_gamma:.2e}, z(0.5) err {err_half:.2e}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion: metric bounds fuzz
// ---------------------------------------------------------------------------

#[test]
fn metric_bounds_fuzz() {
    let mut rng = Lcg(0xacce_0004);
    let meta = DatasetMeta {
        num_classes: 3,
        num_annotators: 3,
        class_names: vec!["a".into(), "b".into(), "c".into()],
        certainty_source: CertaintySource::Foreground,
    };
    let mut violations = 0usize;
    for _ in 0..10_000 {
        let mut annotations = Vec::new();
        for annotator in 1..=3usize {
            if rng.next_f64() < 0.75 {
                let b = random_box(&mut rng, 200.0);
                annotations.push(Annotation {
                    bbox: b,
                    class_id: 1 + rng.below(3),
                    annotator_id: annotator,
                });
            }
        }
        let images = vec![ImageAnnotations {
            image_id: "f".into(),
            width: 256.0,
            height: 256.0,
            annotations,
        }];
        let mut preds = Vec::new();
        for _ in 0..rng.below(3) {
            let mut probs = vec![
                rng.next_f64(),
                rng.next_f64(),
                rng.next_f64(),
                rng.next_f64(),
            ];
            let s: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= s);
            preds.push(Prediction {
                image_id: "f".into(),
                mean: random_box(&mut rng, 200.0),
                var: [rng.next_f64() * 50.0; 4],
                class_probs: probs,
                certainty: rng.next_f64(),
            });
        }
        let r = evaluate_dataset(&images, &preds, &meta, &EvalOptions::default());
        let mut vals = vec![r.tvd, r.tvd_fp, r.fne, r.mean];
        if let Some(l) = r.lue {
            vals.push(l);
        }
        if vals.iter().any(|v| !(0.0..=1.0).contains(v)) {
            violations += 1;
        }
    }

    // Aggregate monotonicity on ordered metric pairs.
    for _ in 0..1000 {
        let lo = [
            rng.next_f64() * 0.8,
            rng.next_f64() * 0.8,
            rng.next_f64() * 0.8,
            rng.next_f64() * 0.8,
        ];
        let hi = [
            lo[0] + rng.next_f64() * (1.0 - lo[0]),
            lo[1] + rng.next_f64() * (1.0 - lo[1]),
            lo[2] + rng.next_f64() * (1.0 - lo[2]),
            lo[3] + rng.next_f64() * (1.0 - lo[3]),
        ];
        let a = aggregate_mean(lo[0], lo[1], Some(lo[2]), lo[3], [1.0; 4]);
        let b = aggregate_mean(hi[0], hi[1], Some(hi[2]), hi[3], [1.0; 4]);
        if b < a - 1e-12 {
            violations += 1;
        }
    }
    report(
        "metric-bounds-fuzz",
        violations == 0,
        &format!("10000 random datasets + 1000 ordered pairs, {violations} violations"),
    );
}

// ---------------------------------------------------------------------------
// Criterion: Krippendorff sanity
// ---------------------------------------------------------------------------

#[test]
fn krippendorff_sanity() {
    let meta = DatasetMeta {
        num_classes: 4,
        num_annotators: 3,
        class_names: (1..=4).map(|i| format!("c{i}")).collect(),
        certainty_source: CertaintySource::Foreground,
    };

    // Unanimous: every cluster gets the same label from every annotator.
    let unanimous_img = ImageAnnotations {
        image_id: "u".into(),
        width: 1000.0,
        height: 1000.0,
        annotations: (0..3)
            .flat_map(|obj| {
                let off = obj as f64 * 100.0;
                (1..=3).map(move |annotator_id| Annotation {
                    bbox: [off, off, off + 50.0, off + 50.0],
                    class_id: 1 + obj % 2,
                    annotator_id,
                })
            })
            .collect(),
    };
    let clustered = cluster_dataset(&[unanimous_img], &meta, 0.5, 0.999);
    let alpha_unanimous = krippendorff_alpha(&clustered, &meta).unwrap();

    // Uniform-random labels over 10^4 synthetic clusters.
    let mut rng = Lcg(0xacce_0005);
    let mut clusters = Vec::with_capacity(10_000);
    for _ in 0..10_000 {
        let members: Vec<ClusterMember> = (1..=3)
            .map(|annotator_id| ClusterMember {
                ann_index: 0,
                bbox: [0.0, 0.0, 1.0, 1.0],
                class_id: 1 + rng.below(4),
                annotator_id,
            })
            .collect();
        clusters.push(AnnotationCluster {
            annotator_certainty: 1.0,
            soft_label: vec![],
            mean_box: [0.0; 4],
            min_box: [0.0; 4],
            max_box: [0.0; 4],
            target_var: [0.0; 4],
            members,
        });
    }
    let alpha_random = krippendorff_alpha(&[clusters], &meta).unwrap();

    report(
        "krippendorff-sanity",
        alpha_unanimous == 1.0 && alpha_random.abs() <= 0.05,
        &format!("unanimous {alpha_unanimous}, random {alpha_random:.4}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion: CLI determinism (byte-identical reruns)
// ---------------------------------------------------------------------------

#[test]
fn cli_determinism() {
    use std::process::Command;

    let bin = env!("CARGO_BIN_EXE_adcal");
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let sim_config = SimulationConfig {
        seed: 77,
        num_images: 12,
        objects_per_image: ObjectsPerImage { min: 1, max: 3 },
        num_classes: 4,
        image_width: 320.0,
        image_height: 320.0,
        object_size: ObjectSize {
            min_frac: 0.08,
            max_frac: 0.2,
        },
        profiles: (1..=3)
            .map(|annotator_id| AnnotatorProfile {
                annotator_id,
                class_accuracy: 0.6,
                miss_rate: 0.3,
                box_jitter_sigma: 0.02,
                spurious_rate: 0.2,
            })
            .collect(),
    };
    let config_path = root.join("sim.json");
    std::fs::write(&config_path, adcal::jsonio::to_canonical_json(&sim_config)).unwrap();

    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).output().unwrap();
        assert!(
            out.status.success(),
            "command {:?} failed: {}",
            args,
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let dir_bytes = |p: &std::path::Path| {
        let mut entries: Vec<(String, Vec<u8>)> = std::fs::read_dir(p)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
            })
            .collect();
        entries.sort();
        entries
    };

    let cfg = config_path.to_str().unwrap().to_string();
    let sim_a = root.join("sim_a");
    let sim_b = root.join("sim_b");
    for out in [&sim_a, &sim_b] {
        run(&[
            "simulate",
            "--config",
            &cfg,
            "--emit-predictions",
            "--beta",
            "0.5",
            "--var-scale",
            "4",
            "--out",
            out.to_str().unwrap(),
        ]);
    }
    assert_eq!(dir_bytes(&sim_a), dir_bytes(&sim_b), "simulate not deterministic");

    let anns = sim_a.join("annotations.json");
    let preds = sim_a.join("predictions.json");
    let anns_s = anns.to_str().unwrap().to_string();
    let preds_s = preds.to_str().unwrap().to_string();

    let mut deterministic = true;
    let pairs: Vec<(Vec<String>, &str)> = vec![
        (
            vec!["cluster".into(), "--annotations".into(), anns_s.clone()],
            "cluster",
        ),
        (
            vec![
                "evaluate".into(),
                "--annotations".into(),
                anns_s.clone(),
                "--predictions".into(),
                preds_s.clone(),
                "--per-image".into(),
                "--dump-matches".into(),
            ],
            "evaluate",
        ),
        (
            vec![
                "fit-calib".into(),
                "--annotations".into(),
                anns_s.clone(),
                "--predictions".into(),
                preds_s.clone(),
            ],
            "fit_calib",
        ),
        (
            vec![
                "reliability".into(),
                "--annotations".into(),
                anns_s.clone(),
                "--predictions".into(),
                preds_s.clone(),
                "--kind".into(),
                "bounding-box".into(),
            ],
            "reliability",
        ),
    ];
    for (args, name) in &pairs {
        let out_a = root.join(format!("{name}_a"));
        let out_b = root.join(format!("{name}_b"));
        for out in [&out_a, &out_b] {
            let mut full: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
            full.push("--out");
            full.push(out.to_str().unwrap());
            run(&full);
        }
        if dir_bytes(&out_a) != dir_bytes(&out_b) {
            deterministic = false;
        }
    }

    // apply-calib and loss-eval consume earlier outputs.
    let bank = root.join("fit_calib_a").join("calibrators.json");
    for name in ["apply_a", "apply_b"] {
        run(&[
            "apply-calib",
            "--bank",
            bank.to_str().unwrap(),
            "--predictions",
            &preds_s,
            "--out",
            root.join(name).to_str().unwrap(),
        ]);
    }
    if dir_bytes(&root.join("apply_a")) != dir_bytes(&root.join("apply_b")) {
        deterministic = false;
    }

    // Build a pairing file from the evaluate match dump.
    #[derive(serde::Deserialize)]
    struct DumpImage {
        image_id: String,
        tp: Vec<(usize, usize)>,
    }
    #[derive(serde::Deserialize)]
    struct Dump {
        images: Vec<DumpImage>,
    }
    let dump: Dump = serde_json::from_str(
        &std::fs::read_to_string(root.join("evaluate_a").join("matches.json")).unwrap(),
    )
    .unwrap();
    let pairing = adcal::cli::PairingFile {
        images: dump
            .images
            .iter()
            .map(|img| adcal::cli::ImagePairing {
                image_id: img.image_id.clone(),
                pairs: img.tp.iter().map(|&(pi, ci)| (ci, pi)).collect(),
            })
            .collect(),
    };
    let pairing_path = root.join("pairing.json");
    std::fs::write(&pairing_path, adcal::jsonio::to_canonical_json(&pairing)).unwrap();
    let clusters_json = root.join("cluster_a").join("clusters.json");
    for name in ["loss_a", "loss_b"] {
        run(&[
            "loss-eval",
            "--clusters",
            clusters_json.to_str().unwrap(),
            "--predictions",
            &preds_s,
            "--pairing",
            pairing_path.to_str().unwrap(),
            "--out",
            root.join(name).to_str().unwrap(),
        ]);
    }
    if dir_bytes(&root.join("loss_a")) != dir_bytes(&root.join("loss_b")) {
        deterministic = false;
    }

    report(
        "cli-determinism",
        deterministic,
        "simulate, cluster, evaluate, fit-calib, apply-calib, loss-eval, reliability rerun byte-identical",
    );
}
