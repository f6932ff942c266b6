//! Accuracy at an IoU threshold, and forward-pass timing.
//!
//! Prediction files hold one whitespace-separated record per line:
//!
//! ```text
//! <id> <x1> <y1> <x2> <y2> <confidence>
//! ```
//!
//! with coordinates in original-image pixels.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::time::Instant;

use crate::data::AnnotationRecord;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::model::GroundingModel;
use crate::training::TrainSample;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub id: String,
    pub bbox: BBox,
    pub confidence: f64,
}

pub fn format_predictions(preds: &[PredictionRecord]) -> String {
    let mut s = String::new();
    for p in preds {
        let b = p.bbox;
        // `{}` on f64 prints the shortest representation that round-trips
        writeln!(s, "{} {} {} {} {} {}", p.id, b.x1, b.y1, b.x2, b.y2, p.confidence).expect("write to string");
    }
    s
}

pub fn parse_predictions(text: &str, path: &str) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_string(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(err(format!("expected 6 fields (id x1 y1 x2 y2 conf), found {}", f.len())));
        }
        let mut v = [0.0; 5];
        for (slot, s) in v.iter_mut().zip(&f[1..]) {
            *slot = s.parse().map_err(|_| err(format!("`{s}` is not a number")))?;
        }
        let bbox = BBox::try_new(v[0], v[1], v[2], v[3]).map_err(|e| err(e.to_string()))?;
        out.push(PredictionRecord {
            id: f[0].to_string(),
            bbox,
            confidence: v[4],
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub threshold: f64,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    /// IoU per sample, in annotation order.
    pub ious: Vec<(String, f64)>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<14} {:>10}", "metric", "value").unwrap();
        writeln!(s, "{:<14} {:>10}", "samples", self.total).unwrap();
        writeln!(s, "{:<14} {:>10}", "correct", self.correct).unwrap();
        writeln!(s, "{:<14} {:>10.4}", format!("Accu@{}", self.threshold), self.accuracy).unwrap();
        s
    }

    pub fn key_values(&self) -> String {
        format!(
            "accuracy={}\ncorrect={}\ntotal={}\nthreshold={}\n",
            self.accuracy, self.correct, self.total, self.threshold
        )
    }
}

/// Scores one prediction per annotation. Predictions are clipped to the
/// image before the IoU; a sample is correct when `IoU >= tau`.
pub fn score(preds: &[PredictionRecord], annotations: &[AnnotationRecord], tau: f64) -> Result<EvalReport> {
    let mut by_id: HashMap<&str, &PredictionRecord> = HashMap::new();
    let mut duplicate = Vec::new();
    for p in preds {
        if by_id.insert(&p.id, p).is_some() && !duplicate.contains(&p.id) {
            duplicate.push(p.id.clone());
        }
    }
    let ann_ids: HashSet<&str> = annotations.iter().map(|a| a.id.as_str()).collect();
    let missing: Vec<String> = annotations
        .iter()
        .filter(|a| !by_id.contains_key(a.id.as_str()))
        .map(|a| a.id.clone())
        .collect();
    let mut unknown: Vec<String> = preds
        .iter()
        .filter(|p| !ann_ids.contains(p.id.as_str()))
        .map(|p| p.id.clone())
        .collect();
    unknown.dedup();
    if !missing.is_empty() || !duplicate.is_empty() || !unknown.is_empty() {
        return Err(Error::IdMismatch {
            missing,
            duplicate,
            unknown,
        });
    }
    if annotations.is_empty() {
        return Err(Error::invalid("no annotations to score"));
    }
    let mut correct = 0;
    let mut ious = Vec::with_capacity(annotations.len());
    for a in annotations {
        let p = by_id[a.id.as_str()];
        let clipped = p.bbox.clip(a.image_w as f64, a.image_h as f64);
        let v = iou(&clipped, &a.gt_box());
        if v >= tau {
            correct += 1;
        }
        ious.push((a.id.clone(), v));
    }
    Ok(EvalReport {
        threshold: tau,
        correct,
        total: annotations.len(),
        accuracy: correct as f64 / annotations.len() as f64,
        ious,
    })
}

/// Runs the model on every sample and returns one prediction each.
pub fn predict_samples(model: &GroundingModel, samples: &[TrainSample]) -> Result<Vec<PredictionRecord>> {
    samples
        .iter()
        .map(|s| {
            let p = model.predict(&s.visual, &s.query, &s.transform)?;
            Ok(PredictionRecord {
                id: s.id.clone(),
                bbox: p.bbox,
                confidence: p.confidence,
            })
        })
        .collect()
}

/// Accuracy of the model on already-prepared samples.
pub fn accuracy(model: &GroundingModel, samples: &[TrainSample], tau: f64) -> Result<f64> {
    let mut correct = 0;
    for s in samples {
        let p = model.predict(&s.visual, &s.query, &s.transform)?;
        let gt = s.transform.invert_box(&s.gt);
        if iou(&p.bbox.clip(s.image_w as f64, s.image_h as f64), &gt) >= tau {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingReport {
    pub mean_ms: f64,
    pub samples: usize,
    pub warmup: usize,
    pub config_hash: String,
}

impl TimingReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<22} {:>12}", "metric", "value").unwrap();
        writeln!(s, "{:<22} {:>12.4}", "mean ms / pair", self.mean_ms).unwrap();
        writeln!(s, "{:<22} {:>12}", "timed pairs", self.samples).unwrap();
        writeln!(s, "{:<22} {:>12}", "warmup pairs", self.warmup).unwrap();
        writeln!(s, "config {}", self.config_hash).unwrap();
        s
    }

    pub fn key_values(&self) -> String {
        format!(
            "mean_ms={}\nsamples={}\nwarmup={}\nconfig_hash={}\n",
            self.mean_ms, self.samples, self.warmup, self.config_hash
        )
    }
}

/// Mean wall-clock milliseconds of a full forward pass plus decode, after
/// `warmup` discarded passes (cycling through `samples`).
pub fn time_inference(model: &GroundingModel, samples: &[TrainSample], warmup: usize, config_hash: &str) -> Result<TimingReport> {
    if warmup == 0 {
        return Err(Error::invalid("timing needs at least one warmup pass"));
    }
    if samples.is_empty() {
        return Err(Error::invalid("timing needs at least one sample"));
    }
    for s in samples.iter().cycle().take(warmup) {
        model.predict(&s.visual, &s.query, &s.transform)?;
    }
    let start = Instant::now();
    for s in samples {
        std::hint::black_box(model.predict(&s.visual, &s.query, &s.transform)?);
    }
    let mean_ms = start.elapsed().as_secs_f64() * 1e3 / samples.len() as f64;
    Ok(TimingReport {
        mean_ms,
        samples: samples.len(),
        warmup,
        config_hash: config_hash.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(id: &str, b: [f64; 4]) -> AnnotationRecord {
        AnnotationRecord {
            id: id.into(),
            image_w: 100,
            image_h: 100,
            query: "q".into(),
            bbox: b,
            image: None,
        }
    }

    fn pred(id: &str, b: [f64; 4]) -> PredictionRecord {
        PredictionRecord {
            id: id.into(),
            bbox: BBox::new(b[0], b[1], b[2], b[3]),
            confidence: 0.5,
        }
    }

    #[test]
    fn boundary_iou_counts_and_clipping_applies() {
        let anns = vec![ann("a", [0.0, 0.0, 10.0, 10.0]), ann("b", [90.0, 90.0, 100.0, 100.0])];
        // a: IoU exactly 0.5; b: prediction extends outside the image and
        // becomes exact after clipping
        let preds = vec![pred("a", [0.0, 0.0, 10.0, 5.0]), pred("b", [90.0, 90.0, 130.0, 130.0])];
        let r = score(&preds, &anns, 0.5).unwrap();
        assert_eq!(r.correct, 2);
        assert_eq!(r.ious[1].1, 1.0);
        let r = score(&preds, &anns, 0.5 + 1e-12).unwrap();
        assert_eq!(r.correct, 1);
    }

    #[test]
    fn id_errors_list_offenders() {
        let anns = vec![ann("a", [0.0, 0.0, 1.0, 1.0]), ann("b", [0.0, 0.0, 1.0, 1.0])];
        let preds = vec![pred("a", [0.0, 0.0, 1.0, 1.0]), pred("a", [0.0, 0.0, 1.0, 1.0]), pred("z", [0.0, 0.0, 1.0, 1.0])];
        match score(&preds, &anns, 0.5) {
            Err(Error::IdMismatch {
                missing,
                duplicate,
                unknown,
            }) => {
                assert_eq!(missing, vec!["b"]);
                assert_eq!(duplicate, vec!["a"]);
                assert_eq!(unknown, vec!["z"]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn prediction_file_round_trip() {
        let preds = vec![pred("x1", [0.25, 1.0 / 3.0, 7.0, 9.5]), pred("x2", [1.0, 2.0, 3.0, 4.0])];
        let back = parse_predictions(&format_predictions(&preds), "p").unwrap();
        assert_eq!(back, preds);
        let err = parse_predictions("a 1 2 3\n", "p.txt").unwrap_err().to_string();
        assert!(err.contains("p.txt:1"), "{err}");
    }
}
