//! Synthetic multi-annotator datasets with controllable noise, plus a
//! synthetic detector with controllable miscalibration.
//!
//! Randomness is counter-based: every draw comes from a stream keyed by
//! (seed, purpose, image, annotator, object), so output is reproducible
//! bit-for-bit regardless of iteration order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{iou, Annotation, BBox, CertaintySource, DatasetMeta, ImageAnnotations, Prediction};
use crate::preprocess::AnnotationCluster;

/// Behavior of one simulated annotator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorProfile {
    pub annotator_id: usize,
    /// Probability of keeping the true class; otherwise a uniform flip among
    /// the other classes.
    pub class_accuracy: f64,
    /// Probability of not annotating an object at all.
    pub miss_rate: f64,
    /// Corner jitter std as a fraction of the box width/height.
    pub box_jitter_sigma: f64,
    /// Expected number of spurious boxes per image (Poisson).
    pub spurious_rate: f64,
}

impl AnnotatorProfile {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("class_accuracy", self.class_accuracy),
            ("miss_rate", self.miss_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!(
                    "annotator {}: {name} {v} outside [0, 1]",
                    self.annotator_id
                )));
            }
        }
        if self.box_jitter_sigma < 0.0 || self.spurious_rate < 0.0 {
            return Err(Error::invalid(format!(
                "annotator {}: negative noise parameter",
                self.annotator_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectsPerImage {
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectSize {
    /// Box side as a fraction of the image side.
    pub min_frac: f64,
    pub max_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub seed: u64,
    pub num_images: usize,
    pub objects_per_image: ObjectsPerImage,
    pub num_classes: usize,
    pub image_width: f64,
    pub image_height: f64,
    pub object_size: ObjectSize,
    pub profiles: Vec<AnnotatorProfile>,
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 {
            return Err(Error::invalid("simulation: num_classes must be >= 1"));
        }
        if self.profiles.len() < 2 {
            return Err(Error::invalid("simulation: need at least 2 annotators"));
        }
        if self.objects_per_image.min > self.objects_per_image.max {
            return Err(Error::invalid("simulation: objects_per_image.min > max"));
        }
        if !(self.object_size.min_frac > 0.0 && self.object_size.max_frac <= 1.0
            && self.object_size.min_frac <= self.object_size.max_frac)
        {
            return Err(Error::invalid("simulation: invalid object_size fractions"));
        }
        for (i, p) in self.profiles.iter().enumerate() {
            if p.annotator_id != i + 1 {
                return Err(Error::invalid(
                    "simulation: profiles must be listed with annotator_id 1..=K in order",
                ));
            }
            p.validate()?;
        }
        Ok(())
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            num_classes: self.num_classes,
            num_annotators: self.profiles.len(),
            class_names: (1..=self.num_classes).map(|j| format!("class_{j:02}")).collect(),
            certainty_source: CertaintySource::Foreground,
        }
    }
}

/// The unobserved object an annotation refers to. Kept only for test oracles;
/// the calibration pipeline never reads it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentObject {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentImage {
    pub image_id: String,
    pub objects: Vec<LatentObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTruth {
    pub images: Vec<LatentImage>,
}

// ---------------------------------------------------------------------------
// Counter-based random streams
// ---------------------------------------------------------------------------

mod purpose {
    pub const LATENT_COUNT: u64 = 1;
    pub const LATENT_BOX: u64 = 2;
    pub const LATENT_CLASS: u64 = 3;
    pub const MISS: u64 = 4;
    pub const FLIP: u64 = 5;
    pub const JITTER: u64 = 6;
    pub const SPURIOUS_COUNT: u64 = 7;
    pub const SPURIOUS_BOX: u64 = 8;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic stream keyed by (seed, purpose, image, annotator, object).
pub(crate) struct Stream {
    state: u64,
}

impl Stream {
    fn new(seed: u64, key: [u64; 4]) -> Self {
        let mut state = splitmix(seed);
        for part in key {
            state = splitmix(state ^ part.wrapping_mul(0xd6e8feb86659fd93));
        }
        Stream { state }
    }

    fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e3779b97f4a7c15);
        splitmix(self.state)
    }

    fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    fn uniform_int(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.next_u64() % (hi - lo + 1) as u64) as usize
    }

    /// Box-Muller transform; one Gaussian per pair of uniforms.
    fn gaussian(&mut self) -> f64 {
        let u1 = self.next_f64().max(f64::MIN_POSITIVE);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Knuth's product method; fine for the small rates used here.
    fn poisson(&mut self, lambda: f64) -> usize {
        if lambda <= 0.0 {
            return 0;
        }
        let limit = (-lambda).exp();
        let mut k = 0usize;
        let mut product = self.next_f64();
        while product > limit {
            k += 1;
            product *= self.next_f64();
        }
        k
    }
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

fn image_id(index: usize) -> String {
    format!("img_{index:05}")
}

/// Margin kept between latent boxes so jittered annotations of different
/// objects never overlap enough to cluster together.
fn placement_margin(cfg: &SimulationConfig) -> f64 {
    0.02 * cfg.image_width.min(cfg.image_height)
}

fn draw_latent_box(stream: &mut Stream, cfg: &SimulationConfig) -> BBox {
    let w = cfg.image_width * stream.uniform(cfg.object_size.min_frac, cfg.object_size.max_frac);
    let h = cfg.image_height * stream.uniform(cfg.object_size.min_frac, cfg.object_size.max_frac);
    let x1 = stream.uniform(0.0, cfg.image_width - w);
    let y1 = stream.uniform(0.0, cfg.image_height - h);
    [x1, y1, x1 + w, y1 + h]
}

fn boxes_separated(a: &BBox, b: &BBox, margin: f64) -> bool {
    let grown = [a[0] - margin, a[1] - margin, a[2] + margin, a[3] + margin];
    iou(&grown, b) == 0.0
}

/// Generate latent objects and every annotator's noisy view of them.
///
/// Latent boxes are placed by rejection sampling so distinct objects stay
/// disjoint (an attempt budget caps the work; crowded configs simply get
/// fewer objects). The latent truth is returned for test oracles only.
pub fn simulate_dataset(cfg: &SimulationConfig) -> Result<(LatentTruth, Vec<ImageAnnotations>)> {
    cfg.validate()?;
    let margin = placement_margin(cfg);
    let mut latent_images = Vec::with_capacity(cfg.num_images);
    let mut annotated_images = Vec::with_capacity(cfg.num_images);

    for img_idx in 0..cfg.num_images {
        let img = img_idx as u64;
        let count = Stream::new(cfg.seed, [purpose::LATENT_COUNT, img, 0, 0])
            .uniform_int(cfg.objects_per_image.min, cfg.objects_per_image.max);

        let mut objects: Vec<LatentObject> = Vec::with_capacity(count);
        for obj_idx in 0..count {
            let mut stream = Stream::new(cfg.seed, [purpose::LATENT_BOX, img, 0, obj_idx as u64]);
            for _attempt in 0..64 {
                let candidate = draw_latent_box(&mut stream, cfg);
                if objects.iter().all(|o| boxes_separated(&o.bbox, &candidate, margin)) {
                    let class_id = Stream::new(cfg.seed, [purpose::LATENT_CLASS, img, 0, obj_idx as u64])
                        .uniform_int(1, cfg.num_classes);
                    objects.push(LatentObject {
                        bbox: candidate,
                        class_id,
                    });
                    break;
                }
            }
        }

        let mut annotations = Vec::new();
        for profile in &cfg.profiles {
            let ann = profile.annotator_id as u64;
            for (obj_idx, object) in objects.iter().enumerate() {
                let obj = obj_idx as u64;
                let missed = Stream::new(cfg.seed, [purpose::MISS, img, ann, obj]).next_f64()
                    < profile.miss_rate;
                if missed {
                    continue;
                }
                let class_id = {
                    let mut stream = Stream::new(cfg.seed, [purpose::FLIP, img, ann, obj]);
                    if stream.next_f64() < profile.class_accuracy || cfg.num_classes == 1 {
                        object.class_id
                    } else {
                        // Uniform among the other classes.
                        let offset = stream.uniform_int(1, cfg.num_classes - 1);
                        (object.class_id - 1 + offset) % cfg.num_classes + 1
                    }
                };
                let bbox = jitter_box(
                    &object.bbox,
                    profile.box_jitter_sigma,
                    cfg,
                    &mut Stream::new(cfg.seed, [purpose::JITTER, img, ann, obj]),
                );
                annotations.push(Annotation {
                    bbox,
                    class_id,
                    annotator_id: profile.annotator_id,
                });
            }

            let spurious =
                Stream::new(cfg.seed, [purpose::SPURIOUS_COUNT, img, ann, 0]).poisson(profile.spurious_rate);
            for s in 0..spurious {
                let mut stream = Stream::new(cfg.seed, [purpose::SPURIOUS_BOX, img, ann, s as u64]);
                let bbox = draw_latent_box(&mut stream, cfg);
                let class_id = stream.uniform_int(1, cfg.num_classes);
                annotations.push(Annotation {
                    bbox,
                    class_id,
                    annotator_id: profile.annotator_id,
                });
            }
        }

        latent_images.push(LatentImage {
            image_id: image_id(img_idx),
            objects,
        });
        annotated_images.push(ImageAnnotations {
            image_id: image_id(img_idx),
            width: cfg.image_width,
            height: cfg.image_height,
            annotations,
        });
    }

    Ok((
        LatentTruth {
            images: latent_images,
        },
        annotated_images,
    ))
}

/// Jitter corners with Gaussian noise scaled by the box size, then restore
/// the corner ordering and clamp to the image.
fn jitter_box(b: &BBox, sigma_frac: f64, cfg: &SimulationConfig, stream: &mut Stream) -> BBox {
    if sigma_frac == 0.0 {
        return *b;
    }
    let w = b[2] - b[0];
    let h = b[3] - b[1];
    let mut x1 = b[0] + stream.gaussian() * sigma_frac * w;
    let mut x2 = b[2] + stream.gaussian() * sigma_frac * w;
    let mut y1 = b[1] + stream.gaussian() * sigma_frac * h;
    let mut y2 = b[3] + stream.gaussian() * sigma_frac * h;
    if x2 < x1 {
        std::mem::swap(&mut x1, &mut x2);
    }
    if y2 < y1 {
        std::mem::swap(&mut y1, &mut y2);
    }
    x1 = x1.clamp(0.0, cfg.image_width);
    x2 = x2.clamp(0.0, cfg.image_width);
    y1 = y1.clamp(0.0, cfg.image_height);
    y2 = y2.clamp(0.0, cfg.image_height);
    // Keep a sliver of area even under extreme jitter.
    if x2 - x1 < 1e-3 {
        x2 = (x1 + 1e-3).min(cfg.image_width);
        x1 = x2 - 1e-3;
    }
    if y2 - y1 < 1e-3 {
        y2 = (y1 + 1e-3).min(cfg.image_height);
        y1 = y2 - 1e-3;
    }
    [x1, y1, x2, y2]
}

// ---------------------------------------------------------------------------
// Synthetic detector
// ---------------------------------------------------------------------------

/// Distortions applied to the oracle detector to create known miscalibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Miscalibration {
    /// Confidence exponent: class probabilities become p^beta, renormalized.
    /// 1.0 leaves the oracle untouched.
    pub confidence_exponent: f64,
    /// Variance scale: predicted variances become s * var.
    pub variance_scale: f64,
    /// Floor applied to the oracle target variance before scaling.
    pub var_floor: f64,
}

impl Default for Miscalibration {
    fn default() -> Self {
        Miscalibration {
            confidence_exponent: 1.0,
            variance_scale: 1.0,
            var_floor: crate::metrics::DEFAULT_VAR_FLOOR,
        }
    }
}

/// Emit the oracle detector for each cluster: mean box, floored target
/// variance, soft label, and annotator certainty, optionally distorted.
///
/// The oracle is the zero-error fixpoint of the metric pipeline; distorted
/// variants give datasets with known miscalibration for self-validation.
pub fn simulate_predictions(
    clustered: &[(String, Vec<AnnotationCluster>)],
    mis: &Miscalibration,
) -> Vec<Prediction> {
    let mut preds = Vec::new();
    for (image_id, clusters) in clustered {
        for cluster in clusters {
            let mut class_probs = cluster.soft_label.clone();
            if mis.confidence_exponent != 1.0 {
                for p in class_probs.iter_mut() {
                    *p = p.powf(mis.confidence_exponent);
                }
            }
            crate::model::normalize_class_probs(&mut class_probs);
            let mut var = [0.0; 4];
            for (v, target) in var.iter_mut().zip(&cluster.target_var) {
                *v = target.max(mis.var_floor) * mis.variance_scale;
            }
            preds.push(Prediction {
                image_id: image_id.clone(),
                mean: cluster.mean_box,
                var,
                class_probs,
                certainty: cluster.annotator_certainty,
            });
        }
    }
    preds
}
