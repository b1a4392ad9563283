//! Command-line pipelines with machine-readable, byte-reproducible outputs.
//!
//! Every subcommand writes its outputs plus a `config.json` echo of the
//! resolved options into an output directory. Writes are staged and renamed
//! so a failed run leaves no partial outputs behind.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalmatch::{MatchOutcome, ZeroIouGuard};
use crate::jsonio::{
    load_annotations, load_predictions, predictions_to_json, read_json, to_canonical_json,
    write_atomic,
};
use crate::loss::{image_loss, BackgroundMode, LossBreakdown, DEFAULT_LAMBDA, DEFAULT_LOG_EPS};
use crate::metrics::{
    match_dataset, metrics_from_evals, reliability_bins, BinKind, EvalOptions, DEFAULT_BINS,
};
use crate::model::{CertaintySource, DatasetMeta, MetricsReport, Prediction};
use crate::posthoc::{
    calibrate_predictions, fit_calibrator_bank, CalibratorBank, FitOptions, RenormMode,
};
use crate::preprocess::{cluster_dataset, krippendorff_alpha, validate_min_iou, AnnotationCluster};
use crate::simulate::{simulate_dataset, simulate_predictions, Miscalibration, SimulationConfig};

/// Resolved options echoed next to every run's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub subcommand: String,
    pub inputs: BTreeMap<String, String>,
    pub min_iou: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub bins: usize,
    pub var_floor: f64,
    pub zero_iou_guard: ZeroIouGuard,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub certainty_source: Option<CertaintySource>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_certainty: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub extra: BTreeMap<String, String>,
}

/// Shared numeric options, defaults pinned here.
#[derive(Debug, Clone)]
pub struct CommonOpts {
    pub min_iou: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub bins: usize,
    pub var_floor: f64,
    pub zero_iou_guard: ZeroIouGuard,
    pub certainty_source: Option<CertaintySource>,
    pub min_certainty: Option<f64>,
    pub seed: Option<u64>,
}

impl Default for CommonOpts {
    fn default() -> Self {
        CommonOpts {
            min_iou: crate::metrics::DEFAULT_MIN_IOU,
            gamma: crate::metrics::DEFAULT_GAMMA,
            lambda: DEFAULT_LAMBDA,
            bins: DEFAULT_BINS,
            var_floor: crate::metrics::DEFAULT_VAR_FLOOR,
            zero_iou_guard: ZeroIouGuard::default(),
            certainty_source: None,
            min_certainty: None,
            seed: None,
        }
    }
}

impl CommonOpts {
    fn eval_options(&self, per_image: bool) -> EvalOptions {
        EvalOptions {
            min_iou: self.min_iou,
            gamma: self.gamma,
            var_floor: self.var_floor,
            zero_iou_guard: self.zero_iou_guard,
            min_certainty: self.min_certainty,
            weights: [1.0; 4],
            per_image,
        }
    }

    fn run_config(&self, subcommand: &str, inputs: &[(&str, &Path)]) -> RunConfig {
        RunConfig {
            subcommand: subcommand.to_string(),
            inputs: inputs
                .iter()
                .map(|(k, v)| (k.to_string(), v.display().to_string()))
                .collect(),
            min_iou: self.min_iou,
            gamma: self.gamma,
            lambda: self.lambda,
            bins: self.bins,
            var_floor: self.var_floor,
            zero_iou_guard: self.zero_iou_guard,
            certainty_source: self.certainty_source,
            min_certainty: self.min_certainty,
            seed: self.seed,
            extra: BTreeMap::new(),
        }
    }
}

/// Stages outputs in memory and writes them all atomically at the end, so a
/// failing run never leaves partial files.
struct OutputStage {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl OutputStage {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(OutputStage {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    fn add_json<T: Serialize>(&mut self, name: &str, value: &T) {
        self.add(name, to_canonical_json(value).into_bytes());
    }

    fn commit(self) -> Result<Vec<PathBuf>> {
        let mut written = Vec::with_capacity(self.files.len());
        for (name, bytes) in &self.files {
            let path = self.dir.join(name);
            write_atomic(&path, bytes)?;
            written.push(path);
        }
        Ok(written)
    }
}

fn apply_certainty_override(meta: &mut DatasetMeta, opts: &CommonOpts) {
    if let Some(source) = opts.certainty_source {
        meta.certainty_source = source;
    }
}

// ---------------------------------------------------------------------------
// Clusters dump format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub member_indices: Vec<usize>,
    pub soft_label: Vec<f64>,
    pub mean_box: [f64; 4],
    pub min_box: [f64; 4],
    pub max_box: [f64; 4],
    pub annotator_certainty: f64,
    pub target_var: [f64; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageClusters {
    pub image_id: String,
    pub clusters: Vec<ClusterRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClustersFile {
    pub meta: DatasetMeta,
    pub images: Vec<ImageClusters>,
}

fn cluster_record(c: &AnnotationCluster) -> ClusterRecord {
    ClusterRecord {
        member_indices: c.members.iter().map(|m| m.ann_index).collect(),
        soft_label: c.soft_label.clone(),
        mean_box: c.mean_box,
        min_box: c.min_box,
        max_box: c.max_box,
        annotator_certainty: c.annotator_certainty,
        target_var: c.target_var,
    }
}

// ---------------------------------------------------------------------------
// cluster
// ---------------------------------------------------------------------------

pub struct ClusterSummary {
    pub num_images: usize,
    pub num_clusters: usize,
    pub per_class_members: Vec<usize>,
    pub alpha: Option<f64>,
}

/// Cluster an annotations file; writes `clusters.json` and prints the
/// cluster count, per-class member counts, and Krippendorff's alpha.
pub fn cmd_cluster(annotations: &Path, out_dir: &Path, opts: &CommonOpts) -> Result<ClusterSummary> {
    validate_min_iou(opts.min_iou)?;
    let set = load_annotations(annotations)?;
    let clustered = cluster_dataset(&set.images, &set.meta, opts.min_iou, opts.gamma);
    let alpha = krippendorff_alpha(&clustered, &set.meta);

    let mut per_class_members = vec![0usize; set.meta.num_classes + 1];
    let mut num_clusters = 0usize;
    for clusters in &clustered {
        num_clusters += clusters.len();
        for c in clusters {
            for m in &c.members {
                per_class_members[m.class_id] += 1;
            }
        }
    }

    let file = ClustersFile {
        meta: set.meta.clone(),
        images: set
            .images
            .iter()
            .zip(&clustered)
            .map(|(img, clusters)| ImageClusters {
                image_id: img.image_id.clone(),
                clusters: clusters.iter().map(cluster_record).collect(),
            })
            .collect(),
    };

    let mut stage = OutputStage::new(out_dir)?;
    stage.add_json("clusters.json", &file);
    stage.add_json("config.json", &opts.run_config("cluster", &[("annotations", annotations)]));
    stage.commit()?;

    Ok(ClusterSummary {
        num_images: set.images.len(),
        num_clusters,
        per_class_members,
        alpha,
    })
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageMatches {
    pub image_id: String,
    #[serde(flatten)]
    pub outcome: MatchOutcome,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchesFile {
    pub images: Vec<ImageMatches>,
}

/// Evaluate predictions against annotations; writes `metrics.json`,
/// `reliability_class.csv`, `reliability_box.csv` (and optionally
/// `matches.json`), and returns the report for display.
///
/// Prediction indices in `matches.json` count within each image's evaluated
/// predictions in file order; with a `min_certainty` filter active they
/// refer to the filtered list, not the raw file.
pub fn cmd_evaluate(
    annotations: &Path,
    predictions: &Path,
    out_dir: &Path,
    opts: &CommonOpts,
    per_image: bool,
    dump_matches: bool,
) -> Result<MetricsReport> {
    validate_min_iou(opts.min_iou)?;
    let mut set = load_annotations(annotations)?;
    apply_certainty_override(&mut set.meta, opts);
    let preds = load_predictions(predictions, &set.meta)?;

    let annotated_ids: std::collections::BTreeSet<&str> =
        set.images.iter().map(|i| i.image_id.as_str()).collect();
    if !preds.is_empty() && !preds.iter().any(|p| annotated_ids.contains(p.image_id.as_str())) {
        return Err(Error::invalid(
            "predictions and annotations share no image ids",
        ));
    }

    let eval_opts = opts.eval_options(per_image);
    let (evals, unknown) = match_dataset(&set.images, &preds, &set.meta, &eval_opts);
    let report = metrics_from_evals(&evals, &eval_opts, unknown);
    let class_bins = reliability_bins(&evals, opts.bins, BinKind::ClassLabel, opts.gamma)?;
    let box_bins = reliability_bins(&evals, opts.bins, BinKind::BoundingBox, opts.gamma)?;

    let mut stage = OutputStage::new(out_dir)?;
    stage.add_json("metrics.json", &report);
    stage.add("reliability_class.csv", class_bins.to_csv().into_bytes());
    stage.add("reliability_box.csv", box_bins.to_csv().into_bytes());
    if dump_matches {
        let file = MatchesFile {
            images: evals
                .iter()
                .map(|e| ImageMatches {
                    image_id: e.image_id.clone(),
                    outcome: e.outcome.clone(),
                })
                .collect(),
        };
        stage.add_json("matches.json", &file);
    }
    stage.add_json(
        "config.json",
        &opts.run_config(
            "evaluate",
            &[("annotations", annotations), ("predictions", predictions)],
        ),
    );
    stage.commit()?;
    Ok(report)
}

/// Table-style display: metrics scaled by 100 with one decimal. Files always
/// hold the unscaled values.
pub fn format_report_line(report: &MetricsReport) -> String {
    let lue = report
        .lue
        .map(|l| format!("{:.1}", l * 100.0))
        .unwrap_or_else(|| "-".to_string());
    format!(
        "TVD {:.1}  TVD_FP {:.1}  LUE {}  FNE {:.1}  Mean {:.1}  (TP {} FP {} FN {})",
        report.tvd * 100.0,
        report.tvd_fp * 100.0,
        lue,
        report.fne * 100.0,
        report.mean * 100.0,
        report.counts.tp,
        report.counts.fp,
        report.counts.fn_
    )
}

// ---------------------------------------------------------------------------
// reliability
// ---------------------------------------------------------------------------

/// Standalone reliability-diagram data for one kind; writes
/// `reliability.csv`.
pub fn cmd_reliability(
    annotations: &Path,
    predictions: &Path,
    out_dir: &Path,
    opts: &CommonOpts,
    kind: BinKind,
) -> Result<()> {
    validate_min_iou(opts.min_iou)?;
    let mut set = load_annotations(annotations)?;
    apply_certainty_override(&mut set.meta, opts);
    let preds = load_predictions(predictions, &set.meta)?;
    let (evals, _) = match_dataset(&set.images, &preds, &set.meta, &opts.eval_options(false));
    let bins = reliability_bins(&evals, opts.bins, kind, opts.gamma)?;

    let mut stage = OutputStage::new(out_dir)?;
    stage.add("reliability.csv", bins.to_csv().into_bytes());
    let mut config = opts.run_config(
        "reliability",
        &[("annotations", annotations), ("predictions", predictions)],
    );
    config.extra.insert(
        "kind".into(),
        match kind {
            BinKind::ClassLabel => "class_label".into(),
            BinKind::BoundingBox => "bounding_box".into(),
        },
    );
    stage.add_json("config.json", &config);
    stage.commit()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// fit-calib / apply-calib
// ---------------------------------------------------------------------------

pub fn cmd_fit_calib(
    annotations: &Path,
    predictions: &Path,
    out_dir: &Path,
    opts: &CommonOpts,
    var_log_space: bool,
) -> Result<CalibratorBank> {
    validate_min_iou(opts.min_iou)?;
    let mut set = load_annotations(annotations)?;
    apply_certainty_override(&mut set.meta, opts);
    let preds = load_predictions(predictions, &set.meta)?;
    let fit_opts = FitOptions {
        eval: opts.eval_options(false),
        var_log_space,
    };
    let bank = fit_calibrator_bank(&set.images, &preds, &set.meta, &fit_opts)?;

    let mut stage = OutputStage::new(out_dir)?;
    stage.add_json("calibrators.json", &bank);
    let mut config = opts.run_config(
        "fit-calib",
        &[("annotations", annotations), ("predictions", predictions)],
    );
    config
        .extra
        .insert("var_log_space".into(), var_log_space.to_string());
    stage.add_json("config.json", &config);
    stage.commit()?;
    Ok(bank)
}

pub fn cmd_apply_calib(
    bank_path: &Path,
    predictions: &Path,
    out_dir: &Path,
    opts: &CommonOpts,
    renorm: RenormMode,
) -> Result<usize> {
    let bank: CalibratorBank = read_json(bank_path)?;
    // Predictions are validated against a meta inferred from the bank size;
    // the certainty source never matters here because stored predictions
    // carry explicit certainties.
    let meta = DatasetMeta {
        num_classes: bank.num_classes(),
        num_annotators: 2,
        class_names: (1..=bank.num_classes()).map(|j| format!("class_{j:02}")).collect(),
        certainty_source: opts.certainty_source.unwrap_or(CertaintySource::Foreground),
    };
    let preds = load_predictions(predictions, &meta)?;
    let calibrated = calibrate_predictions(&preds, &bank, renorm)?;

    let mut stage = OutputStage::new(out_dir)?;
    stage.add("predictions.json", predictions_to_json(&calibrated).into_bytes());
    let mut config = opts.run_config(
        "apply-calib",
        &[("bank", bank_path), ("predictions", predictions)],
    );
    config.extra.insert(
        "renorm".into(),
        match renorm {
            RenormMode::Proportional => "proportional".into(),
            RenormMode::PrintedFormula => "printed_formula".into(),
        },
    );
    stage.add_json("config.json", &config);
    stage.commit()?;
    Ok(calibrated.len())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

/// Generate a synthetic dataset; writes `annotations.json`, `latent.json`,
/// and optionally oracle/distorted `predictions.json`.
pub fn cmd_simulate(
    config_path: &Path,
    out_dir: &Path,
    opts: &CommonOpts,
    emit_predictions: bool,
    beta: f64,
    var_scale: f64,
) -> Result<(usize, usize)> {
    let mut sim_config: SimulationConfig = read_json(config_path)?;
    if let Some(seed) = opts.seed {
        sim_config.seed = seed;
    }
    let (latent, images) = simulate_dataset(&sim_config)?;
    let meta = sim_config.meta();
    let set = crate::jsonio::AnnotationSet {
        meta: meta.clone(),
        images,
    };

    let mut stage = OutputStage::new(out_dir)?;
    stage.add_json("annotations.json", &set);
    stage.add_json("latent.json", &latent);
    let mut num_preds = 0;
    if emit_predictions {
        let clustered: Vec<(String, Vec<AnnotationCluster>)> = set
            .images
            .iter()
            .map(|img| {
                (
                    img.image_id.clone(),
                    crate::preprocess::cluster_annotations(img, &meta, opts.min_iou, opts.gamma),
                )
            })
            .collect();
        let mis = Miscalibration {
            confidence_exponent: beta,
            variance_scale: var_scale,
            var_floor: opts.var_floor,
        };
        let preds = simulate_predictions(&clustered, &mis);
        num_preds = preds.len();
        stage.add("predictions.json", predictions_to_json(&preds).into_bytes());
    }
    let mut config = opts.run_config("simulate", &[("config", config_path)]);
    config.extra.insert("seed".into(), sim_config.seed.to_string());
    config.extra.insert("emit_predictions".into(), emit_predictions.to_string());
    if emit_predictions {
        config.extra.insert("beta".into(), beta.to_string());
        config.extra.insert("var_scale".into(), var_scale.to_string());
    }
    stage.add_json("config.json", &config);
    stage.commit()?;
    Ok((set.images.len(), num_preds))
}

// ---------------------------------------------------------------------------
// loss-eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImagePairing {
    pub image_id: String,
    /// (cluster index, prediction index) pairs; prediction indices count
    /// within the image's own predictions in file order.
    pub pairs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairingFile {
    pub images: Vec<ImagePairing>,
}

/// Evaluate the train-time loss on externally supplied pairs; the oracle an
/// external training framework can diff its loss values against.
///
/// The mean is taken over all pairs pooled across the file's images.
pub fn cmd_loss_eval(
    clusters_path: &Path,
    predictions: &Path,
    pairing_path: &Path,
    out_dir: &Path,
    opts: &CommonOpts,
    mode: BackgroundMode,
) -> Result<LossBreakdown> {
    let clusters_file: ClustersFile = read_json(clusters_path)?;
    let preds = load_predictions(predictions, &clusters_file.meta)?;
    let pairing: PairingFile = read_json(pairing_path)?;

    let mut preds_by_image: BTreeMap<&str, Vec<&Prediction>> = BTreeMap::new();
    for p in &preds {
        preds_by_image.entry(p.image_id.as_str()).or_default().push(p);
    }
    let clusters_by_image: BTreeMap<&str, &ImageClusters> = clusters_file
        .images
        .iter()
        .map(|ic| (ic.image_id.as_str(), ic))
        .collect();

    // Pool pairs across images, then average once.
    let mut pooled_clusters: Vec<AnnotationCluster> = Vec::new();
    let mut pooled_preds: Vec<Prediction> = Vec::new();
    let mut pooled_pairs: Vec<(usize, usize)> = Vec::new();
    for image in &pairing.images {
        let ic = clusters_by_image.get(image.image_id.as_str()).ok_or_else(|| {
            Error::invalid(format!("pairing references unknown image {}", image.image_id))
        })?;
        let image_preds = preds_by_image.get(image.image_id.as_str());
        for &(ci, pi) in &image.pairs {
            let record = ic.clusters.get(ci).ok_or_else(|| {
                Error::invalid(format!(
                    "pairing references cluster {ci} of image {} (has {})",
                    image.image_id,
                    ic.clusters.len()
                ))
            })?;
            let pred = image_preds.and_then(|v| v.get(pi)).ok_or_else(|| {
                Error::invalid(format!(
                    "pairing references prediction {pi} of image {}",
                    image.image_id
                ))
            })?;
            pooled_clusters.push(AnnotationCluster {
                members: Vec::new(),
                soft_label: record.soft_label.clone(),
                mean_box: record.mean_box,
                min_box: record.min_box,
                max_box: record.max_box,
                annotator_certainty: record.annotator_certainty,
                target_var: record.target_var,
            });
            pooled_preds.push((*pred).clone());
            pooled_pairs.push((pooled_clusters.len() - 1, pooled_preds.len() - 1));
        }
    }

    let breakdown = image_loss(
        &pooled_clusters,
        &pooled_preds,
        &pooled_pairs,
        opts.lambda,
        mode,
        DEFAULT_LOG_EPS,
    );

    let mut stage = OutputStage::new(out_dir)?;
    stage.add_json("loss.json", &breakdown);
    let mut config = opts.run_config(
        "loss-eval",
        &[
            ("clusters", clusters_path),
            ("predictions", predictions),
            ("pairing", pairing_path),
        ],
    );
    config.extra.insert(
        "background_mode".into(),
        match mode {
            BackgroundMode::Keep => "keep".into(),
            BackgroundMode::Drop => "drop".into(),
            BackgroundMode::Objectness => "objectness".into(),
        },
    );
    stage.add_json("config.json", &config);
    stage.commit()?;
    Ok(breakdown)
}
