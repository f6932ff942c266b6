//! File-level operations behind the command-line tool: writing synthetic
//! datasets, clustering anchors from an annotation file, and training,
//! saving, loading and running a model bundle.
//!
//! A bundle directory holds
//!
//! ```text
//! model.g1ck    parameters
//! model.toml    architecture
//! config.toml   resolved training config
//! anchors.txt   the nine anchor shapes
//! vocab.txt     token vocabulary (toy query encoder only)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::anchors::{format_anchor_file, kmeans_anchors, parse_anchor_file, AnchorLayout, AnchorShape, KMeansConfig, KMeansResult};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{write_annotations, AnnotationRecord, Vocabulary};
use crate::encoders::FileFeatureProvider;
use crate::error::{read_to_string, Error, Result};
use crate::evaluation::PredictionRecord;
use crate::geometry::{letterbox, BBox};
use crate::model::{GroundingModel, ModelConfig};
use crate::synthetic::{bag_of_words, descriptor_pyramid, SyntheticDataset};
use crate::training::{samples_from_records, train, TrainConfig, TrainReport, TrainSample};

pub const ANNOTATION_FILE: &str = "annotations.jsonl";
pub const IMAGE_DIR: &str = "images";
pub const PYRAMID_DIR: &str = "pyramids";
pub const QUERY_DIR: &str = "queries";

/// Ground-truth boxes mapped into the letterboxed network frame.
pub fn network_boxes(records: &[AnnotationRecord], input_size: u32) -> Result<Vec<BBox>> {
    records
        .iter()
        .map(|r| Ok(letterbox(r.image_w, r.image_h, input_size)?.apply_box(&r.gt_box())))
        .collect()
}

/// Clusters anchor shapes from annotation boxes in the network frame.
pub fn anchors_from_records(records: &[AnnotationRecord], input_size: u32, cfg: &KMeansConfig) -> Result<KMeansResult> {
    kmeans_anchors(&network_boxes(records, input_size)?, cfg)
}

/// Writes `annotations.jsonl` and one PNG per scene under `dir`. With
/// `features`, also writes descriptor pyramids and bag-of-words query
/// embeddings as blobs for the file providers.
pub fn write_synthetic(ds: &SyntheticDataset, dir: &Path, features: bool) -> Result<PathBuf> {
    fs::create_dir_all(dir.join(IMAGE_DIR))?;
    for scene in &ds.scenes {
        scene.render().write_png(&dir.join(IMAGE_DIR).join(format!("{}.png", scene.key)))?;
    }
    if features {
        let size = ds.config.input_size;
        let layout = AnchorLayout::new(size, &[AnchorShape::new(1.0, 1.0); 9])?;
        fs::create_dir_all(dir.join(PYRAMID_DIR))?;
        fs::create_dir_all(dir.join(QUERY_DIR))?;
        let mut pyramids = vec![None; ds.scenes.len()];
        for s in &ds.samples {
            let scene = &ds.scenes[s.scene];
            if pyramids[s.scene].is_none() {
                let t = letterbox(scene.width, scene.height, size)?;
                pyramids[s.scene] = Some(descriptor_pyramid(&scene.render().letterbox(&t), &layout)?);
            }
            let p = pyramids[s.scene].as_ref().expect("just filled");
            FileFeatureProvider::write_pyramid(&dir.join(PYRAMID_DIR), &s.id, p)?;
            FileFeatureProvider::write_query(&dir.join(QUERY_DIR), &s.id, &bag_of_words(&s.query))?;
        }
    }
    let path = dir.join(ANNOTATION_FILE);
    write_annotations(&path, &ds.records(Some(IMAGE_DIR)))?;
    Ok(path)
}

/// A trained model with everything needed to run it on new annotations.
pub struct ModelBundle {
    pub model: GroundingModel,
    pub config: TrainConfig,
    pub vocab: Option<Vocabulary>,
}

impl ModelBundle {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_checkpoint(&dir.join("model.g1ck"), &self.model.params.named_tensors())?;
        let arch = toml::to_string(&self.model.config).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(dir.join("model.toml"), arch)?;
        fs::write(dir.join("config.toml"), self.config.to_toml())?;
        fs::write(dir.join("anchors.txt"), format_anchor_file(&self.model.layout.shapes()))?;
        if let Some(v) = &self.vocab {
            fs::write(dir.join("vocab.txt"), v.to_text())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = TrainConfig::from_toml(&read_to_string(&dir.join("config.toml"))?)?;
        let arch_path = dir.join("model.toml");
        let arch: ModelConfig = toml::from_str(&read_to_string(&arch_path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", arch_path.display())))?;
        let anchors_path = dir.join("anchors.txt");
        let anchors = parse_anchor_file(&read_to_string(&anchors_path)?, &anchors_path.display().to_string())?;
        let vocab_path = dir.join("vocab.txt");
        let vocab = if vocab_path.exists() {
            Some(Vocabulary::from_text(&read_to_string(&vocab_path)?)?)
        } else {
            None
        };
        let mut model = GroundingModel::new(arch, &anchors, config.seed)?;
        model.params.load_named(&load_checkpoint(&dir.join("model.g1ck"))?)?;
        Ok(ModelBundle { model, config, vocab })
    }

    /// Model-ready samples for `records` under this bundle's providers.
    pub fn samples(&self, records: &[AnnotationRecord], annotation_path: &Path) -> Result<Vec<TrainSample>> {
        samples_from_records(records, annotation_path, &self.config, self.vocab.as_ref())
    }

    pub fn predict(&self, samples: &[TrainSample]) -> Result<Vec<PredictionRecord>> {
        crate::evaluation::predict_samples(&self.model, samples)
    }
}

/// Anchors for a run: the configured anchor file, or k-means over the
/// training boxes seeded by the run seed.
pub fn resolve_anchors(cfg: &TrainConfig, records: &[AnnotationRecord]) -> Result<Vec<AnchorShape>> {
    match &cfg.anchors {
        Some(p) => parse_anchor_file(&read_to_string(Path::new(p))?, p),
        None => {
            let km = KMeansConfig {
                seed: cfg.seed,
                ..Default::default()
            };
            Ok(anchors_from_records(records, cfg.input_size, &km)?.anchors)
        }
    }
}

/// Trains a fresh model on an annotation file. Intermediate checkpoints go
/// to `checkpoint_dir` when given.
pub fn train_from_records(
    records: &[AnnotationRecord],
    annotation_path: &Path,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(ModelBundle, TrainReport)> {
    cfg.validate()?;
    let vocab = matches!(cfg.query_provider, crate::training::Provider::Toy)
        .then(|| Vocabulary::from_queries(records.iter().map(|r| r.query.as_str())));
    let samples = samples_from_records(records, annotation_path, cfg, vocab.as_ref())?;
    let anchors = resolve_anchors(cfg, records)?;
    let arch = cfg.model_config(vocab.as_ref().map_or(0, Vocabulary::len), samples.first())?;
    let mut model = GroundingModel::new(arch, &anchors, cfg.seed)?;
    let report = train(&mut model, &samples, cfg, checkpoint_dir)?;
    Ok((
        ModelBundle {
            model,
            config: cfg.clone(),
            vocab,
        },
        report,
    ))
}
