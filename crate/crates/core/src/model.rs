//! Fusion of visual, query and spatial features, and the grounding head.
//!
//! Per pyramid level the raw visual features are mapped to width `D`
//! (affine + ReLU). At every grid location the mapped visual vector, the
//! broadcast query vector and the 8 spatial channels are each l2-normalized,
//! concatenated and fused back to width `D` by a shared affine + ReLU. A
//! per-level affine head emits `(t_x, t_y, t_w, t_h, logit)` for each of the
//! three anchors of a cell; the logits of all levels share one softmax.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorLayout, AnchorShape, ANCHORS_PER_CELL};
use crate::autodiff::{self, Graph, NodeId};
use crate::data::Raster;
use crate::encoders::{FeaturePyramid, QueryEncoder, ToyVisualEncoder};
use crate::error::{Error, Result};
use crate::geometry::{BBox, LetterboxTransform};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::spatial::{spatial_maps, SPATIAL_CHANNELS};
use crate::tensor::Tensor;

/// Values emitted per anchor: four offsets and one logit.
pub const HEAD_FIELDS: usize = 5;
/// Bound applied to `t_w`, `t_h` before exponentiation.
pub const SIZE_LOGIT_CLAMP: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum VisualSource {
    /// Trainable toy encoder; stage widths at strides 4, 8, 16, 32.
    Toy { channels: [usize; 4] },
    /// Frozen features read from blobs, raw widths in level order.
    Features { widths: [usize; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum QuerySource {
    /// Learned token table with `embed_dim` columns.
    Toy { vocab_size: usize, embed_dim: usize },
    /// Frozen `width`-wide embeddings read from blobs.
    Features { width: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: u32,
    pub d: usize,
    pub visual: VisualSource,
    pub query: QuerySource,
    pub use_spatial: bool,
}

impl ModelConfig {
    /// Desk-scale defaults around the toy encoders.
    pub fn toy(input_size: u32, d: usize, vocab_size: usize) -> Self {
        ModelConfig {
            input_size,
            d,
            visual: VisualSource::Toy {
                channels: [8, 16, 16, 16],
            },
            query: QuerySource::Toy {
                vocab_size,
                embed_dim: d,
            },
            use_spatial: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VisualInput {
    /// Letterboxed raster in the network frame.
    Raster(Raster),
    Pyramid(FeaturePyramid),
}

impl VisualInput {
    pub fn flip_horizontal(&self) -> VisualInput {
        match self {
            VisualInput::Raster(r) => VisualInput::Raster(r.flip_horizontal()),
            VisualInput::Pyramid(p) => VisualInput::Pyramid(p.flip_horizontal()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QueryInput {
    Tokens(Vec<usize>),
    Embedding(Tensor),
}

type Affine = (ParamId, ParamId);

pub struct GroundingModel {
    pub config: ModelConfig,
    pub layout: AnchorLayout,
    pub params: ParamStore,
    spatial: Vec<Tensor>,
    visual: Option<ToyVisualEncoder>,
    query: QueryEncoder,
    map: Vec<Affine>,
    fuse: Vec<Affine>,
    head: Vec<Affine>,
    logit_index: Vec<Rc<[u32]>>,
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    /// Per level `[cells, D]`.
    pub fused: [NodeId; 3],
    /// Per level `[cells, 3 * 5]`.
    pub head: [NodeId; 3],
    /// `[1, total anchors]` in flat-index order.
    pub logits: NodeId,
}

/// Numeric head output for every placed anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub offsets: Vec<[f64; 4]>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub anchor: usize,
    /// Box in the network frame.
    pub net_box: BBox,
    /// Box in the original image frame.
    pub bbox: BBox,
    pub confidence: f64,
}

fn affine(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Affine {
    (
        store.add_weight(&format!("{name}.w"), fan_in, fan_out, ParamGroup::Main, rng),
        store.add_bias(&format!("{name}.b"), fan_out, 0.0, ParamGroup::Main),
    )
}

impl GroundingModel {
    /// Builds a freshly initialised model; `seed` fixes every initial weight.
    pub fn new(config: ModelConfig, anchors: &[AnchorShape], seed: u64) -> Result<Self> {
        if config.d == 0 {
            return Err(Error::Config("D must be positive".into()));
        }
        let layout = AnchorLayout::new(config.input_size, anchors)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.d;

        let (visual, raw_widths) = match &config.visual {
            VisualSource::Toy { channels } => {
                let enc = ToyVisualEncoder::new(config.input_size, *channels, &mut params, &mut rng)?;
                let w = enc.widths();
                (Some(enc), w)
            }
            VisualSource::Features { widths } => {
                if widths.contains(&0) {
                    return Err(Error::Config("feature widths must be positive".into()));
                }
                (None, *widths)
            }
        };
        let query = match &config.query {
            QuerySource::Toy {
                vocab_size,
                embed_dim,
            } => QueryEncoder::new(Some(*vocab_size), *embed_dim, d, &mut params, &mut rng)?,
            QuerySource::Features { width } => QueryEncoder::new(None, *width, d, &mut params, &mut rng)?,
        };

        let fuse_in = 2 * d + if config.use_spatial { SPATIAL_CHANNELS } else { 0 };
        let out = ANCHORS_PER_CELL * HEAD_FIELDS;
        let mut map = Vec::new();
        let mut fuse = Vec::new();
        let mut head = Vec::new();
        let mut logit_index = Vec::new();
        for (l, level) in layout.levels.iter().enumerate() {
            map.push(affine(&mut params, &format!("map{l}"), raw_widths[l], d, &mut rng));
            fuse.push(affine(&mut params, &format!("fuse{l}"), fuse_in, d, &mut rng));
            // small head weights start the softmax close to uniform
            head.push((
                params.add_normal(&format!("head{l}.w"), &[d, out], 0.01, ParamGroup::Main, &mut rng),
                params.add_bias(&format!("head{l}.b"), out, 0.0, ParamGroup::Main),
            ));
            let idx: Vec<u32> = (0..level.cells() * ANCHORS_PER_CELL)
                .map(|j| (j * HEAD_FIELDS + HEAD_FIELDS - 1) as u32)
                .collect();
            logit_index.push(idx.into());
        }
        let spatial = spatial_maps(&layout)
            .iter()
            .map(|m| Tensor::new(vec![m.width * m.height, SPATIAL_CHANNELS], m.as_slice().to_vec()))
            .collect::<Result<Vec<_>>>()?;

        Ok(GroundingModel {
            config,
            layout,
            params,
            spatial,
            visual,
            query,
            map,
            fuse,
            head,
            logit_index,
        })
    }

    pub fn total_anchors(&self) -> usize {
        self.layout.total_anchors()
    }

    /// Raw per-level visual nodes in level order.
    pub fn encode_visual(&self, g: &mut Graph, input: &VisualInput) -> Result<[NodeId; 3]> {
        match (input, &self.visual) {
            (VisualInput::Raster(r), Some(enc)) => enc.forward(g, &self.params, r),
            (VisualInput::Pyramid(p), None) => {
                p.check_layout(&self.layout)?;
                let want = match &self.config.visual {
                    VisualSource::Features { widths } => *widths,
                    VisualSource::Toy { .. } => unreachable!("toy source has an encoder"),
                };
                if p.widths() != want {
                    return Err(Error::shape("feature pyramid widths", &p.widths(), &want));
                }
                Ok([0, 1, 2].map(|l| g.constant(p.levels[l].clone())))
            }
            (VisualInput::Raster(_), None) => Err(Error::Config(
                "model expects pyramid features, got a raster".into(),
            )),
            (VisualInput::Pyramid(_), Some(_)) => Err(Error::Config(
                "model has a toy visual encoder, got pyramid features".into(),
            )),
        }
    }

    /// Projected query node `[D]`.
    pub fn encode_query(&self, g: &mut Graph, input: &QueryInput) -> Result<NodeId> {
        let e = match input {
            QueryInput::Tokens(t) => self.query.embed_tokens(g, &self.params, t)?,
            QueryInput::Embedding(t) => {
                if self.query.has_token_table() {
                    return Err(Error::Config("model has a token encoder, got an embedding".into()));
                }
                g.constant(t.clone())
            }
        };
        self.query.project(g, &self.params, e)
    }

    /// Fused `[cells, D]` maps from raw visual nodes and a projected query.
    pub fn fuse(&self, g: &mut Graph, raw: [NodeId; 3], query: NodeId) -> Result<[NodeId; 3]> {
        let qn = g.l2_normalize(query);
        let mut out = Vec::with_capacity(3);
        for l in 0..3 {
            let cells = self.layout.levels[l].cells();
            let (mw, mb) = (g.param(&self.params, self.map[l].0), g.param(&self.params, self.map[l].1));
            let v = g.linear(raw[l], mw, Some(mb))?;
            let v = g.relu(v);
            let vn = g.l2_normalize(v);
            let qb = g.broadcast_rows(qn, cells)?;
            let mut parts = vec![vn, qb];
            if self.config.use_spatial {
                let s = g.constant(self.spatial[l].clone());
                parts.push(g.l2_normalize(s));
            }
            let cat = g.concat(&parts)?;
            let (fw, fb) = (g.param(&self.params, self.fuse[l].0), g.param(&self.params, self.fuse[l].1));
            let f = g.linear(cat, fw, Some(fb))?;
            out.push(g.relu(f));
        }
        Ok([out[0], out[1], out[2]])
    }

    /// Head outputs per level plus the flat logit row.
    pub fn head(&self, g: &mut Graph, fused: [NodeId; 3]) -> Result<([NodeId; 3], NodeId)> {
        let mut heads = Vec::with_capacity(3);
        let mut logits = Vec::with_capacity(3);
        for l in 0..3 {
            let (hw, hb) = (g.param(&self.params, self.head[l].0), g.param(&self.params, self.head[l].1));
            let h = g.linear(fused[l], hw, Some(hb))?;
            let n = self.logit_index[l].len();
            logits.push(g.gather(h, self.logit_index[l].clone(), vec![1, n])?);
            heads.push(h);
        }
        let logits = g.concat(&logits)?;
        Ok(([heads[0], heads[1], heads[2]], logits))
    }

    pub fn forward(&self, g: &mut Graph, visual: &VisualInput, query: &QueryInput) -> Result<ForwardNodes> {
        let raw = self.encode_visual(g, visual)?;
        let q = self.encode_query(g, query)?;
        self.forward_from(g, raw, q)
    }

    /// Forward pass reusing already-encoded visual and query nodes.
    pub fn forward_from(&self, g: &mut Graph, raw: [NodeId; 3], query: NodeId) -> Result<ForwardNodes> {
        let fused = self.fuse(g, raw, query)?;
        let (head, logits) = self.head(g, fused)?;
        Ok(ForwardNodes {
            fused,
            head,
            logits,
        })
    }

    /// `[4]` node with the offsets predicted at anchor `k`.
    pub fn offsets_node(&self, g: &mut Graph, nodes: &ForwardNodes, k: usize) -> Result<NodeId> {
        let pos = self.layout.position(k);
        let cell = pos.cy * self.layout.levels[pos.level].grid + pos.cx;
        let base = (cell * ANCHORS_PER_CELL + pos.slot) * HEAD_FIELDS;
        let idx: Vec<u32> = (0..4).map(|i| (base + i) as u32).collect();
        g.gather(nodes.head[pos.level], idx.into(), vec![4])
    }

    /// Reads the numeric head output out of a finished forward pass.
    pub fn head_output(&self, g: &Graph, nodes: &ForwardNodes) -> HeadOutput {
        let mut offsets = Vec::with_capacity(self.total_anchors());
        for l in 0..3 {
            for chunk in g.value(nodes.head[l]).data().chunks(HEAD_FIELDS) {
                offsets.push([chunk[0], chunk[1], chunk[2], chunk[3]]);
            }
        }
        let logits = g.value(nodes.logits).data().to_vec();
        let probs = autodiff::softmax(&logits);
        HeadOutput {
            offsets,
            logits,
            probs,
        }
    }

    /// Evaluates the head without tracking gradients for later use.
    pub fn run(&self, visual: &VisualInput, query: &QueryInput) -> Result<HeadOutput> {
        let mut g = Graph::new();
        let nodes = self.forward(&mut g, visual, query)?;
        Ok(self.head_output(&g, &nodes))
    }

    /// Single best box: argmax of the joint softmax, decoded and mapped back
    /// to the original frame with `transform`.
    pub fn predict(&self, visual: &VisualInput, query: &QueryInput, transform: &LetterboxTransform) -> Result<Prediction> {
        let out = self.run(visual, query)?;
        Ok(self.top_n_from(&out, transform, 1).remove(0))
    }

    /// The `n` most probable anchors, decoded (fewer when the layout is smaller).
    pub fn top_n(
        &self,
        visual: &VisualInput,
        query: &QueryInput,
        transform: &LetterboxTransform,
        n: usize,
    ) -> Result<Vec<Prediction>> {
        let out = self.run(visual, query)?;
        Ok(self.top_n_from(&out, transform, n))
    }

    pub fn top_n_from(&self, out: &HeadOutput, transform: &LetterboxTransform, n: usize) -> Vec<Prediction> {
        let mut order: Vec<usize> = (0..out.probs.len()).collect();
        // stable sort: equal probabilities keep flat-index order
        order.sort_by(|&a, &b| out.probs[b].total_cmp(&out.probs[a]));
        order
            .into_iter()
            .take(n)
            .map(|k| {
                let net_box = decode(k, out.offsets[k], &self.layout);
                Prediction {
                    anchor: k,
                    net_box,
                    bbox: transform.invert_box(&net_box),
                    confidence: out.probs[k],
                }
            })
            .collect()
    }
}

/// Box in the network frame for anchor `k` shifted by `t`.
pub fn decode(k: usize, t: [f64; 4], layout: &AnchorLayout) -> BBox {
    let a = layout.placed(k);
    let s = a.stride as f64;
    let cx = (autodiff::sigmoid(t[0]) + a.cx as f64) * s;
    let cy = (autodiff::sigmoid(t[1]) + a.cy as f64) * s;
    let w = a.shape.w * t[2].clamp(-SIZE_LOGIT_CLAMP, SIZE_LOGIT_CLAMP).exp();
    let h = a.shape.h * t[3].clamp(-SIZE_LOGIT_CLAMP, SIZE_LOGIT_CLAMP).exp();
    BBox::from_center(cx, cy, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn shapes() -> Vec<AnchorShape> {
        [(5., 6.), (8., 5.), (9., 9.), (12., 7.), (10., 14.), (16., 16.), (20., 12.), (14., 24.), (28., 26.)]
            .iter()
            .map(|&(w, h)| AnchorShape::new(w, h))
            .collect()
    }

    fn tiny(use_spatial: bool) -> GroundingModel {
        let mut cfg = ModelConfig::toy(64, 8, 6);
        cfg.visual = VisualSource::Toy { channels: [3, 4, 4, 4] };
        cfg.use_spatial = use_spatial;
        GroundingModel::new(cfg, &shapes(), 3).unwrap()
    }

    fn raster(seed: u32) -> Raster {
        let mut r = Raster::new(64, 64, 3);
        for (i, v) in r.data.iter_mut().enumerate() {
            *v = ((i as u32).wrapping_mul(2654435761).wrapping_add(seed) % 1000) as f32 / 1000.0;
        }
        r
    }

    #[test]
    fn head_covers_every_anchor_and_normalises() {
        let m = tiny(true);
        let out = m
            .run(&VisualInput::Raster(raster(1)), &QueryInput::Tokens(vec![1, 2]))
            .unwrap();
        assert_eq!(out.probs.len(), 252);
        assert_eq!(out.offsets.len(), 252);
        assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_head_gives_uniform_softmax() {
        let mut m = tiny(true);
        for p in m.params.iter_mut().filter(|p| p.name.starts_with("head")) {
            p.value.data_mut().fill(0.0);
        }
        let out = m
            .run(&VisualInput::Raster(raster(2)), &QueryInput::Tokens(vec![3]))
            .unwrap();
        for p in &out.probs {
            assert!((p - 1.0 / 252.0).abs() < 1e-15);
        }
    }

    #[test]
    fn logit_bias_shift_keeps_argmax() {
        let mut m = tiny(true);
        let vis = VisualInput::Raster(raster(3));
        let q = QueryInput::Tokens(vec![1]);
        let t = LetterboxTransform::identity(64);
        let before = m.predict(&vis, &q, &t).unwrap();
        for p in m.params.iter_mut().filter(|p| p.name.ends_with(".b") && p.name.starts_with("head")) {
            for (i, v) in p.value.data_mut().iter_mut().enumerate() {
                if i % HEAD_FIELDS == HEAD_FIELDS - 1 {
                    *v += 3.7;
                }
            }
        }
        let after = m.predict(&vis, &q, &t).unwrap();
        assert_eq!(before.anchor, after.anchor);
        assert!(after.confidence > 0.0 && after.confidence <= 1.0);
    }

    #[test]
    fn decode_examples() {
        let layout = AnchorLayout::new(64, &shapes()).unwrap();
        for k in [0, 7, 100, 251] {
            let a = layout.placed(k);
            let b = decode(k, [0.0; 4], &layout);
            assert!((b.cx() - a.bbox.cx()).abs() < 1e-12);
            assert!((b.width() - a.shape.w).abs() < 1e-12);
            let b2 = decode(k, [3.0, -2.0, 2f64.ln(), 0.0], &layout);
            assert!((b2.width() - 2.0 * a.shape.w).abs() < 1e-12);
            let s = a.stride as f64;
            assert!(b2.cx() / s > a.cx as f64 && b2.cx() / s < a.cx as f64 + 1.0);
            let huge = decode(k, [0.0, 0.0, 1e6, -1e6], &layout);
            assert!(huge.width().is_finite() && huge.height() > 0.0);
        }
    }

    #[test]
    fn query_scale_invariance_in_fuse() {
        let mut cfg = ModelConfig::toy(64, 8, 1);
        cfg.visual = VisualSource::Features { widths: [3, 3, 3] };
        cfg.query = QuerySource::Features { width: 5 };
        let m = GroundingModel::new(cfg, &shapes(), 0).unwrap();
        let pyr = FeaturePyramid {
            levels: [4, 16, 64].map(|c| Tensor::new(vec![c, 3], (0..c * 3).map(|i| (i as f64).cos()).collect()).unwrap()),
        };
        let vis = VisualInput::Pyramid(pyr);
        let fused = |q: &Tensor| {
            let mut g = Graph::new();
            let raw = m.encode_visual(&mut g, &vis).unwrap();
            let qn = g.constant(q.clone());
            let f = m.fuse(&mut g, raw, qn).unwrap();
            g.value(f[2]).data().to_vec()
        };
        let q = Tensor::from_vec(vec![0.3, -1.0, 0.2, 0.5, 0.1, 0.9, -0.4, 0.05]);
        let q10 = Tensor::from_vec(q.data().iter().map(|v| v * 10.0).collect());
        for (a, b) in fused(&q).iter().zip(fused(&q10)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(m
            .run(&vis, &QueryInput::Embedding(Tensor::from_vec(vec![1.0; 4])))
            .is_err());
    }
}
