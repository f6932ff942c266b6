//! Property tests for invariants that span modules.

mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use onestage::anchors::{assign_levels, kmeans_anchors, AnchorLayout, AnchorShape, KMeansConfig};
use onestage::autodiff::{softmax, Graph};
use onestage::data::{AnnotationRecord, Vocabulary};
use onestage::evaluation::{score, PredictionRecord};
use onestage::geometry::{iou, BBox};
use onestage::model::{decode, GroundingModel, ModelConfig, QueryInput, VisualInput};
use onestage::oracle::{hit_rate, ProposalSet};
use onestage::spatial::SpatialMap;
use onestage::synthetic::{generate, grammar_tokens, SyntheticConfig};
use onestage::tensor::Tensor;
use onestage::training::{assign_target, grounding_loss, samples_from_synthetic, train, TrainConfig};

const DESK_SHAPES: [(f64, f64); 9] = [(6., 5.), (8., 8.), (11., 6.), (10., 17.), (15., 15.), (20., 11.), (18., 32.), (26., 26.), (34., 20.)];

fn desk_shapes() -> Vec<AnchorShape> {
    DESK_SHAPES.iter().map(|&(w, h)| AnchorShape::new(w, h)).collect()
}

fn arb_box(extent: f64) -> impl Strategy<Value = BBox> {
    (0.0..extent, 0.0..extent, 1.0..extent, 1.0..extent).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

fn int_box() -> impl Strategy<Value = BBox> {
    (0u32..40, 0u32..40, 1u32..25, 1u32..25)
        .prop_map(|(x, y, w, h)| BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64))
}

fn record(id: String, b: &BBox) -> AnnotationRecord {
    AnnotationRecord {
        id,
        image_w: 64,
        image_h: 64,
        query: "q".into(),
        bbox: common::quad(b),
        image: None,
    }
}

proptest! {
    #[test]
    fn iou_shrinks_along_nested_family(outer in arb_box(100.0), fx in 0.0..1.0f64, fy in 0.0..1.0f64) {
        // boxes contracting toward an interior point
        let (px, py) = (outer.x1 + fx * outer.width(), outer.y1 + fy * outer.height());
        let mut last = 1.0;
        for i in 0..=10 {
            let s = 1.0 - i as f64 / 11.0;
            let inner = BBox::new(px + (outer.x1 - px) * s, py + (outer.y1 - py) * s, px + (outer.x2 - px) * s, py + (outer.y2 - py) * s);
            let v = iou(&outer, &inner);
            prop_assert!(v <= last + 1e-12);
            last = v;
        }
    }

    #[test]
    fn kmeans_objective_non_increasing_and_deterministic(
        dims in prop::collection::vec((2.0..80.0f64, 2.0..80.0f64), 12..60),
        k in 1usize..6,
        seed in 0u64..1000,
    ) {
        let boxes: Vec<BBox> = dims.iter().map(|&(w, h)| BBox::new(0.0, 0.0, w, h)).collect();
        let cfg = KMeansConfig { k, seed, ..Default::default() };
        let a = kmeans_anchors(&boxes, &cfg).unwrap();
        prop_assert!(a.objective_history.windows(2).all(|w| w[1] <= w[0]));
        let b = kmeans_anchors(&boxes, &cfg).unwrap();
        prop_assert_eq!(a.anchors, b.anchors);
        prop_assert_eq!(a.objective_history, b.objective_history);
    }

    #[test]
    fn level_assignment_is_a_partition(dims in prop::collection::vec((1.0..200.0f64, 1.0..200.0f64), 9)) {
        let shapes: Vec<AnchorShape> = dims.iter().map(|&(w, h)| AnchorShape::new(w, h)).collect();
        let levels = assign_levels(&shapes).unwrap();
        let mut out: Vec<(u64, u64)> = levels.iter().flatten().map(|s| (s.w.to_bits(), s.h.to_bits())).collect();
        let mut want: Vec<(u64, u64)> = shapes.iter().map(|s| (s.w.to_bits(), s.h.to_bits())).collect();
        out.sort();
        want.sort();
        prop_assert_eq!(out, want);
    }

    #[test]
    fn flat_index_is_a_bijection(mult in 1u32..8) {
        let layout = AnchorLayout::new(32 * mult, &desk_shapes()).unwrap();
        let placed = layout.place_anchors();
        prop_assert_eq!(placed.len(), layout.total_anchors());
        for (k, a) in placed.iter().enumerate() {
            prop_assert_eq!(a.index, k);
            prop_assert_eq!(layout.index(layout.position(k)), k);
        }
    }

    #[test]
    fn spatial_translation_structure(w in 1usize..24, h in 1usize..24, a in any::<(u16, u16, u16, u16)>()) {
        let m = SpatialMap::new(w, h);
        let (i, j, i2, j2) = (a.0 as usize % w, a.1 as usize % h, a.2 as usize % w, a.3 as usize % h);
        let (p, q) = (m.at(i, j), m.at(i2, j2));
        let dx = (i as f64 - i2 as f64) / w as f64;
        let dy = (j as f64 - j2 as f64) / h as f64;
        for pair in 0..3 {
            prop_assert!((p[2 * pair] - q[2 * pair] - dx).abs() < 1e-12);
            prop_assert!((p[2 * pair + 1] - q[2 * pair + 1] - dy).abs() < 1e-12);
        }
        prop_assert_eq!(p[6] - q[6], 0.0);
        prop_assert_eq!(p[7] - q[7], 0.0);
    }

    #[test]
    fn spatial_center_matches_anchor_center(mult in 1u32..8, pick in any::<usize>()) {
        let layout = AnchorLayout::new(32 * mult, &desk_shapes()).unwrap();
        let a = layout.placed(pick % layout.total_anchors());
        let grid = layout.levels[a.level].grid;
        let c = SpatialMap::new(grid, grid).at(a.cx, a.cy).to_vec();
        let size = layout.input_size as f64;
        prop_assert!((c[2] * size - a.bbox.cx()).abs() < 1e-9);
        prop_assert!((c[3] * size - a.bbox.cy()).abs() < 1e-9);
    }

    #[test]
    fn softmax_normalises_and_ignores_shifts(x in prop::collection::vec(-30.0..30.0f64, 1..300), c in -50.0..50.0f64) {
        let p = softmax(&x);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let argmax = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        prop_assert_eq!(argmax(&softmax(&shifted)), argmax(&p));
    }

    #[test]
    fn l2_normalize_gives_unit_rows(x in prop::collection::vec(-10.0..10.0f64, 1..40)) {
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(norm > 1e-6);
        let mut g = Graph::new();
        let n = x.len();
        let v = g.constant(Tensor::new(vec![1, n], x).unwrap());
        let y = g.l2_normalize(v);
        let out = g.value(y).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((out - 1.0).abs() < 1e-9);
    }

    #[test]
    fn decoded_center_stays_in_its_cell(pick in any::<usize>(), t in prop::array::uniform4(-1e6..1e6f64)) {
        let layout = AnchorLayout::new(64, &desk_shapes()).unwrap();
        let k = pick % layout.total_anchors();
        let a = layout.placed(k);
        let b = decode(k, t, &layout);
        let s = a.stride as f64;
        prop_assert!(b.cx() >= a.cx as f64 * s && b.cx() <= (a.cx + 1) as f64 * s);
        prop_assert!(b.cy() >= a.cy as f64 * s && b.cy() <= (a.cy + 1) as f64 * s);
        prop_assert!(b.width().is_finite() && b.height().is_finite());
    }

    #[test]
    fn score_ignores_prediction_order(
        pairs in prop::collection::vec((int_box(), int_box()), 1..30),
        seed in any::<u64>(),
    ) {
        let anns: Vec<AnnotationRecord> = pairs.iter().enumerate().map(|(i, (g, _))| record(format!("p{i}"), g)).collect();
        let mut preds: Vec<PredictionRecord> = pairs
            .iter()
            .enumerate()
            .map(|(i, (_, p))| PredictionRecord { id: format!("p{i}"), bbox: *p, confidence: 0.5 })
            .collect();
        let base = score(&preds, &anns, 0.5).unwrap();
        preds.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(&score(&preds, &anns, 0.5).unwrap(), &base);
        let accs: Vec<f64> = (0..=20).map(|i| score(&preds, &anns, i as f64 / 20.0).unwrap().accuracy).collect();
        prop_assert!(accs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn hit_rate_is_order_free_within_and_beyond_top_n(
        items in prop::collection::vec((int_box(), prop::collection::vec(int_box(), 0..12)), 1..12),
        n in 1usize..12,
        tau in 0.0..1.0f64,
        seed in any::<u64>(),
    ) {
        let anns: Vec<AnnotationRecord> = items.iter().enumerate().map(|(i, (g, _))| record(format!("h{i}"), g)).collect();
        let mut set = ProposalSet::new();
        let mut permuted = ProposalSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, (_, list)) in items.iter().enumerate() {
            set.insert(format!("h{i}"), list.clone());
            let mut p = list.clone();
            let cut = n.min(p.len());
            p[..cut].shuffle(&mut rng);
            p[cut..].shuffle(&mut rng);
            permuted.insert(format!("h{i}"), p);
        }
        prop_assert_eq!(hit_rate(&set, &anns, n, tau).unwrap(), hit_rate(&permuted, &anns, n, tau).unwrap());
        prop_assert_eq!(hit_rate(&set, &anns, n, tau).unwrap(), common::hit_rate_ref(&set, &anns, n, tau));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn grounding_loss_is_non_negative(gt in arb_box(60.0), seed in 0u64..1000, tokens in prop::collection::vec(0usize..6, 1..4)) {
        let model = GroundingModel::new(ModelConfig::toy(64, 8, 6), &desk_shapes(), seed).unwrap();
        let visual = VisualInput::Raster(onestage::data::Raster::new(64, 64, 3));
        let mut g = Graph::new();
        let nodes = model.forward(&mut g, &visual, &QueryInput::Tokens(tokens)).unwrap();
        let target = assign_target(&gt, &model.layout).unwrap();
        let l = grounding_loss(&mut g, &model, &nodes, &target, 5.0).unwrap();
        prop_assert!(g.value(l).item() >= 0.0);
    }

    #[test]
    fn synthetic_queries_resolve_to_their_target(seed in any::<u64>()) {
        let ds = generate(60, seed, &SyntheticConfig::default()).unwrap();
        for s in &ds.samples {
            prop_assert_eq!(ds.scenes[s.scene].referents(&s.query), vec![s.target]);
        }
    }
}

#[test]
fn zero_weight_triplet_leaves_trajectory_unchanged() {
    let ds = generate(48, 3, &SyntheticConfig::default()).unwrap();
    let vocab = Vocabulary::from_tokens(grammar_tokens().into_iter().map(String::from));
    let samples = samples_from_synthetic(&ds, 64, &vocab).unwrap();
    let base = TrainConfig {
        steps: 25,
        batch: 8,
        d: 8,
        embed_dim: 8,
        ..TrainConfig::desk()
    };
    let run = |cfg: &TrainConfig| {
        let mut m = GroundingModel::new(cfg.model_config(vocab.len(), None).unwrap(), &desk_shapes(), cfg.seed).unwrap();
        let rep = train(&mut m, &samples, cfg, None).unwrap();
        let bits: Vec<u64> = m.params.iter().flat_map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect();
        (rep.losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), bits)
    };
    let vanilla = run(&base);
    let zero = run(&TrainConfig {
        triplet: true,
        w_reg: 0.0,
        ..base
    });
    assert_eq!(vanilla, zero);
}
