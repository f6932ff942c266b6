//! Reference implementations used as oracles by the integration tests. They
//! deliberately avoid the library's own geometry and autodiff code.

#![allow(dead_code)]

use onestage::anchors::AnchorLayout;
use onestage::data::AnnotationRecord;
use onestage::geometry::BBox;
use onestage::oracle::ProposalSet;

/// Central finite differences of `f` at `x` with step `h`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over paired entries.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// IoU written out from the definition.
pub fn iou_ref(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn quad(b: &BBox) -> [f64; 4] {
    [b.x1, b.y1, b.x2, b.y2]
}

/// Every placed anchor recomputed from the level table: `(index, box, cell
/// contains the box center)`.
fn all_anchors(gt: [f64; 4], layout: &AnchorLayout) -> Vec<(usize, [f64; 4], bool)> {
    let (gx, gy) = ((gt[0] + gt[2]) / 2.0, (gt[1] + gt[3]) / 2.0);
    let mut out = Vec::new();
    let mut k = 0;
    for level in &layout.levels {
        let s = level.stride as f64;
        let clamp = |v: f64| ((v / s).floor().max(0.0) as usize).min(level.grid - 1);
        let (ccx, ccy) = (clamp(gx), clamp(gy));
        for cy in 0..level.grid {
            for cx in 0..level.grid {
                for shape in &level.anchors {
                    let (mx, my) = ((cx as f64 + 0.5) * s, (cy as f64 + 0.5) * s);
                    let b = [mx - shape.w / 2.0, my - shape.h / 2.0, mx + shape.w / 2.0, my + shape.h / 2.0];
                    out.push((k, b, cx == ccx && cy == ccy));
                    k += 1;
                }
            }
        }
    }
    out
}

/// Positive anchor by scanning every placed anchor. Anchors within a
/// relative `tie` of the best IoU are tied; a tied anchor whose cell holds
/// the box center is preferred, then the lowest index.
pub fn exhaustive_target(gt: [f64; 4], layout: &AnchorLayout, tie: f64) -> usize {
    let scored: Vec<(usize, f64, bool)> = all_anchors(gt, layout)
        .into_iter()
        .map(|(k, b, c)| (k, iou_ref(b, gt), c))
        .collect();
    let best = scored.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<&(usize, f64, bool)> = scored.iter().filter(|s| s.1 >= best * (1.0 - tie)).collect();
    tied.iter()
        .filter(|s| s.2)
        .map(|s| s.0)
        .min()
        .unwrap_or_else(|| tied.iter().map(|s| s.0).min().unwrap())
}

/// Hit rate by a plain double loop.
pub fn hit_rate_ref(proposals: &ProposalSet, anns: &[AnnotationRecord], n: usize, tau: f64) -> f64 {
    let mut hits = 0usize;
    for a in anns {
        let mut hit = false;
        if let Some(list) = proposals.get(&a.id) {
            for (r, p) in list.iter().enumerate() {
                if r < n && iou_ref(quad(p), a.bbox) > tau {
                    hit = true;
                }
            }
        }
        if hit {
            hits += 1;
        }
    }
    hits as f64 / anns.len() as f64
}
