//! Python bindings. Boxes cross the boundary as `(x1, y1, x2, y2)` tuples.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyFileNotFoundError, PyOSError, PyValueError};
use pyo3::prelude::*;

use onestage::anchors::{self, AnchorShape, KMeansConfig};
use onestage::data::read_annotations;
use onestage::error::read_to_string;
use onestage::evaluation::{self, parse_predictions, PredictionRecord};
use onestage::geometry::{self, BBox};
use onestage::oracle::{self, ProposalSet};
use onestage::pipeline::{self, ModelBundle};
use onestage::synthetic::{generate, Profile, SyntheticConfig};
use onestage::training::{self, TrainConfig};
use onestage::Error;

type Quad = (f64, f64, f64, f64);

fn err(e: Error) -> PyErr {
    match e {
        Error::MissingFile { .. } => PyFileNotFoundError::new_err(e.to_string()),
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn bbox(q: Quad) -> PyResult<BBox> {
    BBox::try_new(q.0, q.1, q.2, q.3).map_err(err)
}

fn quad(b: &BBox) -> Quad {
    (b.x1, b.y1, b.x2, b.y2)
}

/// IoU of two boxes.
#[pyfunction]
fn iou(a: Quad, b: Quad) -> PyResult<f64> {
    Ok(geometry::iou(&bbox(a)?, &bbox(b)?))
}

/// Aspect-preserving resize of the long edge to `target` plus padding.
#[pyclass(unsendable)]
struct Letterbox(geometry::LetterboxTransform);

#[pymethods]
impl Letterbox {
    #[new]
    fn new(image_w: u32, image_h: u32, target: u32) -> PyResult<Self> {
        geometry::letterbox(image_w, image_h, target).map(Letterbox).map_err(err)
    }

    #[getter]
    fn scale(&self) -> f64 {
        self.0.scale
    }

    #[getter]
    fn pad(&self) -> (f64, f64) {
        (self.0.pad_x, self.0.pad_y)
    }

    /// Original-image box to the network frame.
    fn apply_box(&self, b: Quad) -> PyResult<Quad> {
        Ok(quad(&self.0.apply_box(&bbox(b)?)))
    }

    /// Network-frame box back to the original image.
    fn invert_box(&self, b: Quad) -> PyResult<Quad> {
        Ok(quad(&self.0.invert_box(&bbox(b)?)))
    }
}

/// K-means over box shapes with `1 - IoU` distance. Returns `(w, h)` pairs
/// sorted by area.
#[pyfunction]
#[pyo3(signature = (boxes, k = 9, seed = 0))]
fn kmeans_anchors(boxes: Vec<Quad>, k: usize, seed: u64) -> PyResult<Vec<(f64, f64)>> {
    let boxes: Vec<BBox> = boxes.into_iter().map(bbox).collect::<PyResult<_>>()?;
    let cfg = KMeansConfig {
        k,
        seed,
        ..Default::default()
    };
    let r = anchors::kmeans_anchors(&boxes, &cfg).map_err(err)?;
    Ok(r.anchors.iter().map(|a| (a.w, a.h)).collect())
}

/// Anchors placed over the three-level pyramid of an input size.
#[pyclass(unsendable)]
struct AnchorLayout(anchors::AnchorLayout);

#[pymethods]
impl AnchorLayout {
    #[new]
    fn new(input_size: u32, shapes: Vec<(f64, f64)>) -> PyResult<Self> {
        let shapes: Vec<AnchorShape> = shapes.into_iter().map(|(w, h)| AnchorShape::new(w, h)).collect();
        anchors::AnchorLayout::new(input_size, &shapes).map(AnchorLayout).map_err(err)
    }

    #[getter]
    fn total_anchors(&self) -> usize {
        self.0.total_anchors()
    }

    #[getter]
    fn total_locations(&self) -> usize {
        self.0.total_locations()
    }

    /// Box of flat anchor `k` in the network frame.
    fn anchor_box(&self, k: usize) -> PyResult<Quad> {
        if k >= self.0.total_anchors() {
            return Err(PyValueError::new_err(format!("anchor {k} out of range")));
        }
        Ok(quad(&self.0.placed(k).bbox))
    }

    /// Positive anchor index and target offsets for a ground-truth box.
    fn assign_target(&self, gt: Quad) -> PyResult<(usize, [f64; 4])> {
        let t = training::assign_target(&bbox(gt)?, &self.0).map_err(err)?;
        Ok((t.anchor, t.offsets))
    }

    /// Box for anchor `k` shifted by offsets `t`.
    fn decode(&self, k: usize, t: [f64; 4]) -> PyResult<Quad> {
        if k >= self.0.total_anchors() {
            return Err(PyValueError::new_err(format!("anchor {k} out of range")));
        }
        Ok(quad(&onestage::model::decode(k, t, &self.0)))
    }
}

/// Writes a synthetic dataset to `out_dir`; returns the annotation path.
#[pyfunction]
#[pyo3(signature = (out_dir, count, seed = 0, profile = "spatial", features = false))]
fn generate_synthetic(out_dir: PathBuf, count: usize, seed: u64, profile: &str, features: bool) -> PyResult<PathBuf> {
    let cfg = SyntheticConfig {
        profile: profile.parse::<Profile>().map_err(err)?,
        ..Default::default()
    };
    let ds = generate(count, seed, &cfg).map_err(err)?;
    pipeline::write_synthetic(&ds, &out_dir, features).map_err(err)
}

/// Accuracy of a prediction file against annotations: `(accuracy, correct, total)`.
#[pyfunction]
#[pyo3(signature = (predictions, annotations, iou = 0.5))]
fn score(predictions: PathBuf, annotations: PathBuf, iou: f64) -> PyResult<(f64, usize, usize)> {
    let preds = parse_predictions(&read_to_string(&predictions).map_err(err)?, &predictions.display().to_string()).map_err(err)?;
    let anns = read_annotations(&annotations).map_err(err)?;
    let r = evaluation::score(&preds, &anns, iou).map_err(err)?;
    Ok((r.accuracy, r.correct, r.total))
}

/// Hit rate of ranked proposals (`{id: [box, ...]}`, best first).
#[pyfunction]
#[pyo3(signature = (proposals, annotations, n, iou = 0.5))]
fn hit_rate(proposals: BTreeMap<String, Vec<Quad>>, annotations: PathBuf, n: usize, iou: f64) -> PyResult<f64> {
    let mut set = ProposalSet::new();
    for (id, list) in proposals {
        set.insert(id, list.into_iter().map(bbox).collect::<PyResult<_>>()?);
    }
    let anns = read_annotations(&annotations).map_err(err)?;
    oracle::hit_rate(&set, &anns, n, iou).map_err(err)
}

/// Training config of the small CPU preset, as TOML.
#[pyfunction]
fn desk_config() -> String {
    TrainConfig::desk().to_toml()
}

/// A trained grounding model bundle.
#[pyclass(unsendable)]
struct Model(ModelBundle);

#[pymethods]
impl Model {
    /// Trains on an annotation file. `config` is TOML; keys it omits take
    /// the desk preset values.
    #[staticmethod]
    #[pyo3(signature = (annotations, config = None))]
    fn train(annotations: PathBuf, config: Option<&str>) -> PyResult<Self> {
        let cfg = match config {
            Some(text) => TrainConfig::desk().overlay_toml(text).map_err(err)?,
            None => TrainConfig::desk(),
        };
        let records = read_annotations(&annotations).map_err(err)?;
        let (bundle, _) = pipeline::train_from_records(&records, &annotations, &cfg, None).map_err(err)?;
        Ok(Model(bundle))
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        ModelBundle::load(&dir).map(Model).map_err(err)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.0.save(&dir).map_err(err)
    }

    /// SHA-256 of the model's training config.
    #[getter]
    fn config_hash(&self) -> String {
        self.0.config.hash()
    }

    #[getter]
    fn total_anchors(&self) -> usize {
        self.0.model.total_anchors()
    }

    /// One `(id, box, confidence)` per annotation record.
    fn predict(&self, annotations: PathBuf) -> PyResult<Vec<(String, Quad, f64)>> {
        let preds = predict_file(&self.0, &annotations)?;
        Ok(preds.into_iter().map(|p| (p.id, quad(&p.bbox), p.confidence)).collect())
    }

    /// Accu@`iou` on an annotation file.
    #[pyo3(signature = (annotations, iou = 0.5))]
    fn evaluate(&self, annotations: PathBuf, iou: f64) -> PyResult<f64> {
        let preds = predict_file(&self.0, &annotations)?;
        let anns = read_annotations(&annotations).map_err(err)?;
        Ok(evaluation::score(&preds, &anns, iou).map_err(err)?.accuracy)
    }
}

fn predict_file(b: &ModelBundle, annotations: &Path) -> PyResult<Vec<PredictionRecord>> {
    let records = read_annotations(annotations).map_err(err)?;
    let samples = b.samples(&records, annotations).map_err(err)?;
    b.predict(&samples).map_err(err)
}

#[pymodule]
fn onestage_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans_anchors, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(hit_rate, m)?)?;
    m.add_function(wrap_pyfunction!(desk_config, m)?)?;
    m.add_class::<Letterbox>()?;
    m.add_class::<AnchorLayout>()?;
    m.add_class::<Model>()?;
    Ok(())
}
