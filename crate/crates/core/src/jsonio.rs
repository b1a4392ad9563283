//! Canonical JSON file formats and loaders.
//!
//! Every float is serialized with 17 significant digits so that
//! write -> read -> write is a byte-level fixpoint, which the CLI relies on
//! for reproducible outputs.

use std::fs;
use std::io::{self, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::{Error, Result};
use crate::model::{
    clamp_box, validate_annotation, validate_prediction, box_is_valid, BBox, DatasetMeta,
    ImageAnnotations, Prediction,
};

// ---------------------------------------------------------------------------
// Canonical serialization
// ---------------------------------------------------------------------------

/// Pretty formatter that writes every float with 17 significant digits.
struct CanonicalFormatter<'a> {
    inner: PrettyFormatter<'a>,
}

impl<'a> CanonicalFormatter<'a> {
    fn new() -> Self {
        CanonicalFormatter {
            inner: PrettyFormatter::new(),
        }
    }
}

impl<'a> Formatter for CanonicalFormatter<'a> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.begin_array(writer)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_array(writer)
    }

    fn begin_array_value<W: ?Sized + io::Write>(
        &mut self,
        writer: &mut W,
        first: bool,
    ) -> io::Result<()> {
        self.inner.begin_array_value(writer, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_array_value(writer)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.begin_object(writer)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_object(writer)
    }

    fn begin_object_key<W: ?Sized + io::Write>(
        &mut self,
        writer: &mut W,
        first: bool,
    ) -> io::Result<()> {
        self.inner.begin_object_key(writer, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.begin_object_value(writer)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_object_value(writer)
    }
}

/// Serialize to the canonical JSON text (pretty, 17-significant-digit floats,
/// trailing newline).
pub fn to_canonical_json<T: Serialize>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, CanonicalFormatter::new());
    value
        .serialize(&mut ser)
        .expect("in-memory JSON serialization cannot fail");
    buf.push(b'\n');
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

/// Write canonical JSON atomically: serialize, write to a temp file in the
/// same directory, then rename over the destination.
pub fn write_canonical_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_canonical_json(value).as_bytes())
}

/// Atomic byte write (temp file + rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        source: e,
    })
}

// ---------------------------------------------------------------------------
// Annotations file
// ---------------------------------------------------------------------------

/// On-disk annotations schema: dataset meta plus per-image annotation lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub meta: DatasetMeta,
    pub images: Vec<ImageAnnotations>,
}

/// Load and validate an annotations file.
///
/// Boxes are clamped to the image bounds; a box that degenerates under
/// clamping (or was degenerate to begin with) is rejected with the offending
/// image named. Images are returned sorted by `image_id`.
pub fn load_annotations(path: &Path) -> Result<AnnotationSet> {
    let mut set: AnnotationSet = read_json(path)?;
    set.meta.validate()?;
    for image in set.images.iter_mut() {
        if image.width <= 0.0 || image.height <= 0.0 || !image.width.is_finite() || !image.height.is_finite() {
            return Err(Error::invalid(format!(
                "image {}: nonpositive dimensions {}x{}",
                image.image_id, image.width, image.height
            )));
        }
        for ann in image.annotations.iter_mut() {
            validate_annotation(ann, &image.image_id, &set.meta)?;
            let clamped = clamp_box(&ann.bbox, image.width, image.height);
            if !box_is_valid(&clamped) {
                return Err(Error::invalid(format!(
                    "image {}: box [{}, {}, {}, {}] degenerates when clamped to image bounds",
                    image.image_id, ann.bbox[0], ann.bbox[1], ann.bbox[2], ann.bbox[3]
                )));
            }
            ann.bbox = clamped;
        }
    }
    set.images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let dup = set
        .images
        .windows(2)
        .find(|w| w[0].image_id == w[1].image_id);
    if let Some(w) = dup {
        return Err(Error::invalid(format!(
            "duplicate image_id {}",
            w[0].image_id
        )));
    }
    Ok(set)
}

pub fn save_annotations(path: &Path, set: &AnnotationSet) -> Result<()> {
    write_canonical_json(path, set)
}

// ---------------------------------------------------------------------------
// Predictions file
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredictionRecord {
    image_id: String,
    mean: BBox,
    var: BBox,
    class_probs: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    certainty: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredictionsFile {
    predictions: Vec<PredictionRecord>,
}

/// Load and validate a predictions file against the dataset meta.
///
/// Missing certainty fields are derived per `meta.certainty_source`.
pub fn load_predictions(path: &Path, meta: &DatasetMeta) -> Result<Vec<Prediction>> {
    let file: PredictionsFile = read_json(path)?;
    let mut out = Vec::with_capacity(file.predictions.len());
    for (index, rec) in file.predictions.into_iter().enumerate() {
        let certainty_present = rec.certainty.is_some();
        let mut pred = Prediction {
            image_id: rec.image_id,
            mean: rec.mean,
            var: rec.var,
            class_probs: rec.class_probs,
            certainty: rec.certainty.unwrap_or(0.0),
        };
        validate_prediction(&mut pred, index, certainty_present, meta)?;
        out.push(pred);
    }
    Ok(out)
}

/// Serialize predictions with their certainty made explicit, so a reload
/// never re-derives it.
pub fn predictions_to_json(preds: &[Prediction]) -> String {
    let file = PredictionsFile {
        predictions: preds
            .iter()
            .map(|p| PredictionRecord {
                image_id: p.image_id.clone(),
                mean: p.mean,
                var: p.var,
                class_probs: p.class_probs.clone(),
                certainty: Some(p.certainty),
            })
            .collect(),
    };
    to_canonical_json(&file)
}

pub fn save_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    write_atomic(path, predictions_to_json(preds).as_bytes())
}
