//! Target assignment, losses and the training loop.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anchors::AnchorLayout;
use crate::autodiff::{Graph, NodeId};
use crate::checkpoint::save_checkpoint;
use crate::data::{image_path, AnnotationRecord, Raster, Vocabulary};
use crate::encoders::FileFeatureProvider;
use crate::error::{Error, Result};
use crate::geometry::{iou, letterbox, BBox, LetterboxTransform};
use crate::model::{ForwardNodes, GroundingModel, ModelConfig, QueryInput, QuerySource, VisualInput, VisualSource};
use crate::optim::{LrSchedule, RmsProp};
use crate::synthetic::{has_lateral_token, SyntheticDataset};

/// Clamp applied to the argument of the inverse sigmoid.
pub const SIGMOID_EPS: f64 = 1e-6;
/// Relative IoU difference below which two anchors count as tied.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Positive anchor and the offsets that decode it onto the ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainTarget {
    pub anchor: usize,
    pub offsets: [f64; 4],
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(SIGMOID_EPS, 1.0 - SIGMOID_EPS);
    (p / (1.0 - p)).ln()
}

/// Offsets that make anchor `k` decode to `gt` (inverse of
/// [`crate::model::decode`]).
pub fn encode_offsets(k: usize, gt: &BBox, layout: &AnchorLayout) -> [f64; 4] {
    let a = layout.placed(k);
    let s = a.stride as f64;
    [
        logit(gt.cx() / s - a.cx as f64),
        logit(gt.cy() / s - a.cy as f64),
        (gt.width() / a.shape.w).ln(),
        (gt.height() / a.shape.h).ln(),
    ]
}

/// Grid cell containing the box center on a level, clamped to the grid.
fn center_cell(gt: &BBox, stride: f64, grid: usize) -> (usize, usize) {
    let c = |v: f64| ((v / stride).floor().max(0.0) as usize).min(grid - 1);
    (c(gt.cx()), c(gt.cy()))
}

/// Picks the anchor with the highest IoU against `gt` (network frame).
///
/// Anchors whose IoU is within [`TIE_TOLERANCE`] (relative) of the best are
/// tied. Among tied anchors one whose cell contains the box center wins,
/// then the lowest flat index. For a fixed anchor shape the IoU can only
/// fall as the anchor center moves away from the box center along either
/// axis, so the best anchor of each (level, slot) always sits in the
/// center-containing cell; only those nine candidates are evaluated.
pub fn assign_target(gt: &BBox, layout: &AnchorLayout) -> Result<TrainTarget> {
    if gt.is_degenerate() || !gt.area().is_finite() {
        return Err(Error::invalid(format!("degenerate ground-truth box {gt:?}")));
    }
    let mut cands = Vec::with_capacity(9);
    for (l, level) in layout.levels.iter().enumerate() {
        let (cx, cy) = center_cell(gt, level.stride as f64, level.grid);
        for slot in 0..level.anchors.len() {
            let k = layout.index(crate::anchors::AnchorPosition { level: l, cx, cy, slot });
            cands.push((k, iou(&layout.placed(k).bbox, gt)));
        }
    }
    let best = cands.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let anchor = cands
        .iter()
        .filter(|c| c.1 >= best * (1.0 - TIE_TOLERANCE))
        .map(|c| c.0)
        .min()
        .expect("at least one candidate");
    Ok(TrainTarget {
        anchor,
        offsets: encode_offsets(anchor, gt, layout),
    })
}

/// Loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_coord: f64,
    pub triplet: bool,
    pub margin: f64,
    pub w_reg: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_coord: 5.0,
            triplet: false,
            margin: 1.0,
            w_reg: 1.0,
        }
    }
}

/// Per-sample grounding loss: softmax cross entropy at the positive anchor
/// plus `lambda_coord` times the squared offset error there.
pub fn grounding_loss(
    g: &mut Graph,
    model: &GroundingModel,
    nodes: &ForwardNodes,
    target: &TrainTarget,
    lambda_coord: f64,
) -> Result<NodeId> {
    let ce = g.softmax_cross_entropy(nodes.logits, target.anchor)?;
    let t = model.offsets_node(g, nodes, target.anchor)?;
    let se = g.squared_error(t, &target.offsets)?;
    g.weighted_sum(&[(1.0, ce), (lambda_coord, se)])
}

/// Spatial mean of each fused level, concatenated: `[1, 3 * D]`.
pub fn pooled_feature(g: &mut Graph, fused: [NodeId; 3]) -> Result<NodeId> {
    let pooled = fused.map(|f| g.mean_rows(f));
    g.concat(&pooled)
}

/// `max(0, |a - p|^2 - |a - n|^2 + margin)`.
pub fn triplet_loss(g: &mut Graph, anchor: NodeId, pos: NodeId, neg: NodeId, margin: f64) -> Result<NodeId> {
    let dp = g.sq_dist(anchor, pos)?;
    let dn = g.sq_dist(anchor, neg)?;
    let diff = g.weighted_sum(&[(1.0, dp), (-1.0, dn)])?;
    let shifted = g.add_scalar(diff, margin);
    Ok(g.hinge(shifted))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provider {
    /// Trainable toy encoder.
    Toy,
    /// Frozen features from blob files.
    File,
}

/// Every knob of a training run. Serialized as TOML; unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub input_size: u32,
    pub d: usize,
    /// Anchor file; when absent anchors are clustered from the training boxes.
    pub anchors: Option<String>,
    pub lambda_coord: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub flip: bool,
    pub triplet: bool,
    pub margin: f64,
    pub w_reg: f64,
    pub backbone_lr_mult: f64,
    pub main_lr_mult: f64,
    pub visual_provider: Provider,
    pub query_provider: Provider,
    pub visual_channels: [usize; 4],
    pub embed_dim: usize,
    pub use_spatial: bool,
    /// Write `ckpt_<step>.g1ck` every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub pyramid_dir: Option<String>,
    pub query_dir: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            input_size: 256,
            d: 512,
            anchors: None,
            lambda_coord: 5.0,
            lr: 1e-4,
            steps: 10_000,
            batch: 32,
            seed: 0,
            flip: true,
            triplet: false,
            margin: 1.0,
            w_reg: 1.0,
            backbone_lr_mult: 0.1,
            main_lr_mult: 1.0,
            visual_provider: Provider::Toy,
            query_provider: Provider::Toy,
            visual_channels: [8, 16, 16, 16],
            embed_dim: 16,
            use_spatial: true,
            checkpoint_every: 0,
            pyramid_dir: None,
            query_dir: None,
        }
    }
}

impl TrainConfig {
    /// Small configuration that trains the synthetic task on one CPU core.
    pub fn desk() -> Self {
        TrainConfig {
            input_size: 64,
            d: 32,
            embed_dim: 32,
            visual_channels: [8, 8, 8, 8],
            lambda_coord: 1.0,
            lr: 5e-3,
            steps: 5000,
            backbone_lr_mult: 1.0,
            ..Default::default()
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda_coord: self.lambda_coord,
            triplet: self.triplet,
            margin: self.margin,
            w_reg: self.w_reg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda_coord", self.lambda_coord),
            ("lr", self.lr),
            ("margin", self.margin),
            ("w_reg", self.w_reg),
            ("backbone_lr_mult", self.backbone_lr_mult),
            ("main_lr_mult", self.main_lr_mult),
        ];
        for (k, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be a finite value >= 0, got {v}")));
            }
        }
        if self.batch == 0 || self.d == 0 || self.embed_dim == 0 {
            return Err(Error::Config("batch, d and embed_dim must be positive".into()));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// This config with the keys present in `text` replaced.
    pub fn overlay_toml(&self, text: &str) -> Result<Self> {
        let over: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut base = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        base.extend(over);
        let cfg: TrainConfig = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn provider(&self) -> FileFeatureProvider {
        FileFeatureProvider {
            pyramid_dir: self.pyramid_dir.as_ref().map(PathBuf::from),
            query_dir: self.query_dir.as_ref().map(PathBuf::from),
        }
    }

    /// Model architecture implied by this config; feature widths come from
    /// a loaded sample when file providers are selected.
    pub fn model_config(&self, vocab_size: usize, sample: Option<&TrainSample>) -> Result<ModelConfig> {
        let visual = match self.visual_provider {
            Provider::Toy => VisualSource::Toy {
                channels: self.visual_channels,
            },
            Provider::File => match sample.map(|s| s.visual.as_ref()) {
                Some(VisualInput::Pyramid(p)) => VisualSource::Features { widths: p.widths() },
                _ => return Err(Error::Config("file visual provider needs a pyramid sample".into())),
            },
        };
        let query = match self.query_provider {
            Provider::Toy => QuerySource::Toy {
                vocab_size,
                embed_dim: self.embed_dim,
            },
            Provider::File => match sample.map(|s| &s.query) {
                Some(QueryInput::Embedding(t)) => QuerySource::Features { width: t.len() },
                _ => return Err(Error::Config("file query provider needs an embedding sample".into())),
            },
        };
        Ok(ModelConfig {
            input_size: self.input_size,
            d: self.d,
            visual,
            query,
            use_spatial: self.use_spatial,
        })
    }
}

/// A sample ready for the model: inputs in the network frame plus what is
/// needed to map predictions back.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    /// Samples sharing a key come from the same image.
    pub image_key: String,
    pub visual: Rc<VisualInput>,
    pub query: QueryInput,
    pub query_text: String,
    /// Ground truth in the network frame.
    pub gt: BBox,
    pub transform: LetterboxTransform,
    pub image_w: u32,
    pub image_h: u32,
}

impl TrainSample {
    pub fn lateral(&self) -> bool {
        has_lateral_token(&self.query_text)
    }
}

fn query_input(cfg: &TrainConfig, vocab: Option<&Vocabulary>, provider: &FileFeatureProvider, id: &str, text: &str) -> Result<QueryInput> {
    Ok(match cfg.query_provider {
        Provider::Toy => {
            let v = vocab.ok_or_else(|| Error::Config("toy query provider needs a vocabulary".into()))?;
            QueryInput::Tokens(v.encode(text))
        }
        Provider::File => QueryInput::Embedding(provider.load_query(id)?),
    })
}

/// Loads annotation records into model-ready samples. Images are read (or
/// feature blobs loaded) once per distinct image.
pub fn samples_from_records(
    records: &[AnnotationRecord],
    annotation_path: &Path,
    cfg: &TrainConfig,
    vocab: Option<&Vocabulary>,
) -> Result<Vec<TrainSample>> {
    let provider = cfg.provider();
    let mut cache: HashMap<String, Rc<VisualInput>> = HashMap::new();
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let transform = letterbox(rec.image_w, rec.image_h, cfg.input_size)?;
        let visual = match cfg.visual_provider {
            Provider::Toy => {
                let path = image_path(annotation_path, rec).ok_or_else(|| {
                    Error::Config(format!(
                        "record `{}` has no image; the toy visual encoder needs one",
                        rec.id
                    ))
                })?;
                let key = path.display().to_string();
                if let Some(v) = cache.get(&key) {
                    v.clone()
                } else {
                    let raster = Raster::read_png(&path)?;
                    if (raster.width, raster.height) != (rec.image_w as usize, rec.image_h as usize) {
                        return Err(Error::format(format!(
                            "{}: image is {}x{}, record `{}` says {}x{}",
                            path.display(),
                            raster.width,
                            raster.height,
                            rec.id,
                            rec.image_w,
                            rec.image_h
                        )));
                    }
                    let v = Rc::new(VisualInput::Raster(raster.letterbox(&transform)));
                    cache.insert(key, v.clone());
                    v
                }
            }
            Provider::File => Rc::new(VisualInput::Pyramid(provider.load_pyramid(&rec.id)?)),
        };
        out.push(TrainSample {
            id: rec.id.clone(),
            image_key: rec.image_key().to_string(),
            visual,
            query: query_input(cfg, vocab, &provider, &rec.id, &rec.query)?,
            query_text: rec.query.clone(),
            gt: transform.apply_box(&rec.gt_box()),
            transform,
            image_w: rec.image_w,
            image_h: rec.image_h,
        });
    }
    Ok(out)
}

/// Model-ready samples straight from an in-memory synthetic dataset, with
/// the toy providers.
pub fn samples_from_synthetic(ds: &SyntheticDataset, input_size: u32, vocab: &Vocabulary) -> Result<Vec<TrainSample>> {
    let mut rendered: Vec<Option<Rc<VisualInput>>> = vec![None; ds.scenes.len()];
    let mut out = Vec::with_capacity(ds.samples.len());
    for (s, rec) in ds.samples.iter().zip(ds.records(None)) {
        let scene = &ds.scenes[s.scene];
        let transform = letterbox(scene.width, scene.height, input_size)?;
        let visual = rendered[s.scene]
            .get_or_insert_with(|| Rc::new(VisualInput::Raster(scene.render().letterbox(&transform))))
            .clone();
        out.push(TrainSample {
            id: s.id.clone(),
            image_key: scene.key.clone(),
            visual,
            query: QueryInput::Tokens(vocab.encode(&s.query)),
            query_text: s.query.clone(),
            gt: transform.apply_box(&rec.gt_box()),
            transform,
            image_w: scene.width,
            image_h: scene.height,
        });
    }
    Ok(out)
}

/// Per-step statistics of a training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean grounding loss of each step's batch.
    pub losses: Vec<f64>,
    /// Weighted triplet term of each step (zero when disabled).
    pub reg_losses: Vec<f64>,
    /// Learning rate after the last step.
    pub final_lr: f64,
    pub checkpoints: Vec<PathBuf>,
}

/// Triplet partners of each sample.
struct Bags {
    positives: Vec<Vec<usize>>,
    intra_negatives: Vec<Vec<usize>>,
}

fn same_box(a: &BBox, b: &BBox) -> bool {
    iou(a, b) > 1.0 - 1e-9
}

fn build_bags(samples: &[TrainSample]) -> Bags {
    let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_image.entry(&s.image_key).or_default().push(i);
    }
    let mut positives = vec![Vec::new(); samples.len()];
    let mut intra_negatives = vec![Vec::new(); samples.len()];
    for group in by_image.values() {
        for &i in group {
            for &j in group {
                if i == j {
                    continue;
                }
                if same_box(&samples[i].gt, &samples[j].gt) {
                    if samples[i].query_text != samples[j].query_text {
                        positives[i].push(j);
                    }
                } else {
                    intra_negatives[i].push(j);
                }
            }
        }
    }
    Bags {
        positives,
        intra_negatives,
    }
}

/// Trains `model` in place. Deterministic for a given config and sample
/// order: batch order and flips draw from one seeded stream, triplet
/// partners from another.
pub fn train(model: &mut GroundingModel, samples: &[TrainSample], cfg: &TrainConfig, checkpoint_dir: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let loss_cfg = cfg.loss();
    let use_triplet = loss_cfg.triplet && loss_cfg.w_reg > 0.0;
    let bags = use_triplet.then(|| build_bags(samples));
    let schedule = LrSchedule::new(cfg.lr, cfg.steps);
    let mut opt = RmsProp::new(&model.params);
    opt.backbone_multiplier = cfg.backbone_lr_mult;
    opt.main_multiplier = cfg.main_lr_mult;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pair_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    pair_rng.set_stream(1);
    let size = model.layout.input_size as f64;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut intra_turn = true;
    let mut report = TrainReport::default();
    let inv_b = 1.0 / cfg.batch as f64;

    for step in 0..cfg.steps {
        let lr = schedule.lr(step);
        model.params.zero_grad();
        let mut loss_sum = 0.0;
        let mut reg_sum = 0.0;
        for _ in 0..cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            let s = &samples[i];

            let partners = bags.as_ref().and_then(|b| {
                let pos = *b.positives[i].choose(&mut pair_rng)?;
                let intra = b.intra_negatives[i].choose(&mut pair_rng).copied();
                let neg = if intra_turn && intra.is_some() {
                    intra
                } else {
                    // inter-image negative: resample until the image differs
                    (0..64)
                        .map(|_| pair_rng.random_range(0..samples.len()))
                        .find(|&j| samples[j].image_key != s.image_key)
                        .or(intra)
                }?;
                intra_turn = !intra_turn;
                Some((pos, neg))
            });

            let lateral = s.lateral()
                || partners.is_some_and(|(p, n)| samples[p].lateral() || samples[n].lateral());
            let flip = cfg.flip && !lateral && rng.random_bool(0.5);
            let (visual, gt) = if flip {
                (s.visual.flip_horizontal(), s.gt.flip_horizontal(size))
            } else {
                ((*s.visual).clone(), s.gt)
            };
            let target = assign_target(&gt, &model.layout)?;

            let mut g = Graph::new();
            let raw = model.encode_visual(&mut g, &visual)?;
            let q = model.encode_query(&mut g, &s.query)?;
            let nodes = model.forward_from(&mut g, raw, q)?;
            let loss = grounding_loss(&mut g, model, &nodes, &target, loss_cfg.lambda_coord)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss { step, lr });
            }
            loss_sum += lv;
            let mut terms = vec![(inv_b, loss)];

            if let Some((p, n)) = partners {
                let fa = pooled_feature(&mut g, nodes.fused)?;
                let qp = model.encode_query(&mut g, &samples[p].query)?;
                let fp_nodes = model.fuse(&mut g, raw, qp)?;
                let fp = pooled_feature(&mut g, fp_nodes)?;
                let qn = model.encode_query(&mut g, &samples[n].query)?;
                let raw_n = if samples[n].image_key == s.image_key {
                    raw
                } else {
                    model.encode_visual(&mut g, &samples[n].visual)?
                };
                let fn_nodes = model.fuse(&mut g, raw_n, qn)?;
                let fneg = pooled_feature(&mut g, fn_nodes)?;
                let h = triplet_loss(&mut g, fa, fp, fneg, loss_cfg.margin)?;
                let hv = g.value(h).item();
                if !hv.is_finite() {
                    return Err(Error::NonFiniteLoss { step, lr });
                }
                reg_sum += loss_cfg.w_reg * hv;
                terms.push((loss_cfg.w_reg, h));
            }

            let root = g.weighted_sum(&terms)?;
            g.backward(root);
            g.accumulate_into(&mut model.params);
        }
        opt.step(&mut model.params, lr);
        report.losses.push(loss_sum * inv_b);
        report.reg_losses.push(reg_sum);
        if step % 100 == 0 {
            log::info!("step {step} lr {lr:.3e} loss {:.4} reg {reg_sum:.4}", loss_sum * inv_b);
        }
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
                let path = dir.join(format!("ckpt_{:06}.g1ck", step + 1));
                save_checkpoint(&path, &model.params.named_tensors())?;
                report.checkpoints.push(path);
            }
        }
    }
    report.final_lr = schedule.lr(cfg.steps);
    Ok(report)
}
