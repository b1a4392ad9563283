//! Evaluation and calibration of probabilistic object detectors against
//! multi-annotator annotation distributions, without ground truth.
//!
//! The pipeline clusters each image's annotations into per-object groups
//! ([`preprocess`]), matches detector outputs to those clusters
//! ([`evalmatch`]), and scores how well the predicted class distributions and
//! box variances track the annotators' agreement ([`metrics`]). A train-time
//! loss oracle ([`loss`]) and a weighted isotonic post-hoc calibrator
//! ([`posthoc`]) implement the two calibration routes, and [`simulate`]
//! generates synthetic annotator data for closed-loop validation.

pub mod assignment;
pub mod cli;
pub mod error;
pub mod evalmatch;
pub mod jsonio;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod normal;
pub mod posthoc;
pub mod preprocess;
pub mod simulate;

pub use error::{Error, Result};
pub use model::{
    iou, Annotation, BBox, CertaintySource, DatasetMeta, ImageAnnotations, MetricsReport,
    Prediction,
};
