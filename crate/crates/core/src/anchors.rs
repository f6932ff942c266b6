//! Anchor shapes: K-means clustering in `1 - IoU` space, assignment of the
//! nine shapes to the three pyramid levels, and grid placement with a flat
//! global index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Width/height of an anchor template in network-input pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorShape {
    pub w: f64,
    pub h: f64,
}

impl AnchorShape {
    pub fn new(w: f64, h: f64) -> Self {
        debug_assert!(w > 0.0 && h > 0.0);
        AnchorShape { w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    fn of(b: &BBox) -> Self {
        AnchorShape {
            w: b.width(),
            h: b.height(),
        }
    }
}

/// IoU of two shapes aligned at a common center.
pub fn shape_iou(a: &AnchorShape, b: &AnchorShape) -> f64 {
    let inter = a.w.min(b.w) * a.h.min(b.h);
    inter / (a.area() + b.area() - inter)
}

fn shape_distance(a: &AnchorShape, b: &AnchorShape) -> f64 {
    1.0 - shape_iou(a, b)
}

/// Ascending area, ties broken by width then height.
fn area_order(a: &AnchorShape, b: &AnchorShape) -> std::cmp::Ordering {
    a.area()
        .total_cmp(&b.area())
        .then(a.w.total_cmp(&b.w))
        .then(a.h.total_cmp(&b.h))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CentroidUpdate {
    Median,
    Mean,
}

#[derive(Debug, Clone)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    pub update: CentroidUpdate,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            k: 9,
            seed: 0,
            max_iter: 300,
            tol: 1e-9,
            update: CentroidUpdate::Median,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// Centroids sorted by ascending area.
    pub anchors: Vec<AnchorShape>,
    /// Objective `sum(1 - IoU(box, centroid))` after every assignment step.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn assign(points: &[AnchorShape], centroids: &[AnchorShape], labels: &mut [usize]) -> f64 {
    let mut total = 0.0;
    for (p, label) in points.iter().zip(labels.iter_mut()) {
        let (best, d) = centroids
            .iter()
            .enumerate()
            .map(|(c, cen)| (c, shape_distance(p, cen)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least one centroid");
        *label = best;
        total += d;
    }
    total
}

fn cluster_cost(points: &[AnchorShape], labels: &[usize], cluster: usize, c: &AnchorShape) -> f64 {
    points
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == cluster)
        .map(|(p, _)| shape_distance(p, c))
        .sum()
}

/// Clusters box shapes with `1 - IoU` as the distance.
///
/// Seeding is k-means++ under the same distance. The centroid update (median
/// or mean of the member widths/heights) is accepted per cluster only when it
/// does not raise that cluster's cost, so the objective never increases.
/// A cluster that loses all members is re-seeded at the box farthest from its
/// current centroid.
pub fn kmeans_anchors(boxes: &[BBox], cfg: &KMeansConfig) -> Result<KMeansResult> {
    if boxes.is_empty() {
        return Err(Error::invalid("kmeans_anchors: no boxes"));
    }
    if cfg.k == 0 {
        return Err(Error::invalid("kmeans_anchors: k must be >= 1"));
    }
    if cfg.k > boxes.len() {
        return Err(Error::invalid(format!(
            "kmeans_anchors: k = {} exceeds the {} boxes available",
            cfg.k,
            boxes.len()
        )));
    }
    if let Some(b) = boxes.iter().find(|b| b.is_degenerate()) {
        return Err(Error::invalid(format!("kmeans_anchors: degenerate box {b:?}")));
    }
    let points: Vec<AnchorShape> = boxes.iter().map(AnchorShape::of).collect();
    let mut distinct = points.clone();
    distinct.sort_by(area_order);
    distinct.dedup();
    if cfg.k > distinct.len() {
        return Err(Error::invalid(format!(
            "kmeans_anchors: k = {} exceeds the {} distinct shapes available",
            cfg.k,
            distinct.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    let mut nearest: Vec<f64> = points
        .iter()
        .map(|p| shape_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < cfg.k {
        let weights: Vec<f64> = nearest.iter().map(|d| d * d).collect();
        let total: f64 = weights.iter().sum();
        let pick = if total <= 0.0 {
            // every point already coincides with a centroid; take the first unused shape
            let p = distinct
                .iter()
                .find(|s| !centroids.contains(s))
                .expect("k <= distinct shapes");
            *p
        } else {
            let mut r = rng.random::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if r < *w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            points[idx]
        };
        centroids.push(pick);
        for (p, d) in points.iter().zip(nearest.iter_mut()) {
            *d = d.min(shape_distance(p, &pick));
        }
    }

    let mut labels = vec![0usize; points.len()];
    let mut history = vec![assign(&points, &centroids, &mut labels)];
    let mut iterations = 0;
    for _ in 0..cfg.max_iter {
        iterations += 1;
        let mut shift: f64 = 0.0;
        for c in 0..cfg.k {
            let mut ws = Vec::new();
            let mut hs = Vec::new();
            for (p, &l) in points.iter().zip(&labels) {
                if l == c {
                    ws.push(p.w);
                    hs.push(p.h);
                }
            }
            if ws.is_empty() {
                // re-seed from the box farthest from its own centroid
                let far = points
                    .iter()
                    .zip(&labels)
                    .map(|(p, &l)| (p, shape_distance(p, &centroids[l])))
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(p, _)| *p)
                    .expect("non-empty points");
                centroids[c] = far;
                shift = f64::INFINITY;
                continue;
            }
            let candidate = match cfg.update {
                CentroidUpdate::Median => AnchorShape::new(median(&mut ws), median(&mut hs)),
                CentroidUpdate::Mean => AnchorShape::new(
                    ws.iter().sum::<f64>() / ws.len() as f64,
                    hs.iter().sum::<f64>() / hs.len() as f64,
                ),
            };
            let old_cost = cluster_cost(&points, &labels, c, &centroids[c]);
            let new_cost = cluster_cost(&points, &labels, c, &candidate);
            if new_cost <= old_cost {
                shift = shift.max(shape_distance(&candidate, &centroids[c]));
                centroids[c] = candidate;
            }
        }
        let obj = assign(&points, &centroids, &mut labels);
        let prev = *history.last().expect("history seeded");
        assert!(
            obj <= prev + 1e-9 * prev.abs().max(1.0),
            "k-means objective increased: {prev} -> {obj}"
        );
        history.push(obj);
        if shift <= cfg.tol {
            break;
        }
    }

    centroids.sort_by(area_order);
    Ok(KMeansResult {
        anchors: centroids,
        objective_history: history,
        iterations,
    })
}

/// Splits nine shapes into three triples by area: the largest three go to the
/// stride-32 level, the middle three to stride 16, the smallest to stride 8.
/// Returned in level order `[stride 32, stride 16, stride 8]`, each triple
/// sorted by ascending area.
pub fn assign_levels(shapes: &[AnchorShape]) -> Result<[[AnchorShape; 3]; 3]> {
    if shapes.len() != 9 {
        return Err(Error::invalid(format!(
            "assign_levels needs exactly 9 anchor shapes, got {}",
            shapes.len()
        )));
    }
    if let Some(s) = shapes.iter().find(|s| !(s.w > 0.0 && s.h > 0.0)) {
        return Err(Error::invalid(format!("non-positive anchor shape {s:?}")));
    }
    let mut sorted = shapes.to_vec();
    sorted.sort_by(area_order);
    let triple = |i: usize| [sorted[i], sorted[i + 1], sorted[i + 2]];
    Ok([triple(6), triple(3), triple(0)])
}

pub const STRIDES: [u32; 3] = [32, 16, 8];
pub const ANCHORS_PER_CELL: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    pub stride: u32,
    /// Grid side; grids are square.
    pub grid: usize,
    pub anchors: [AnchorShape; 3],
    /// Flat index of this level's first anchor.
    pub offset: usize,
}

impl PyramidLevel {
    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn anchor_count(&self) -> usize {
        self.cells() * ANCHORS_PER_CELL
    }
}

/// All grid-placed anchors across the three levels.
///
/// Flat index order: level (stride 32, 16, 8), then row `cy`, then column
/// `cx`, then anchor slot `a`:
/// `k = offset(level) + (cy * grid + cx) * 3 + a`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorLayout {
    pub input_size: u32,
    pub levels: Vec<PyramidLevel>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorPosition {
    pub level: usize,
    pub cx: usize,
    pub cy: usize,
    pub slot: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacedAnchor {
    pub index: usize,
    pub level: usize,
    pub cx: usize,
    pub cy: usize,
    pub slot: usize,
    pub stride: u32,
    pub shape: AnchorShape,
    pub bbox: BBox,
}

impl AnchorLayout {
    /// Builds the layout from nine anchor shapes.
    pub fn new(input_size: u32, shapes: &[AnchorShape]) -> Result<Self> {
        if input_size == 0 || input_size % 32 != 0 {
            return Err(Error::invalid(format!(
                "input size {input_size} must be a positive multiple of 32"
            )));
        }
        let per_level = assign_levels(shapes)?;
        let mut offset = 0;
        let levels = STRIDES
            .iter()
            .zip(per_level)
            .map(|(&stride, anchors)| {
                let grid = (input_size / stride) as usize;
                let level = PyramidLevel {
                    stride,
                    grid,
                    anchors,
                    offset,
                };
                offset += level.anchor_count();
                level
            })
            .collect();
        Ok(AnchorLayout { input_size, levels })
    }

    pub fn total_anchors(&self) -> usize {
        self.levels.iter().map(|l| l.anchor_count()).sum()
    }

    pub fn total_locations(&self) -> usize {
        self.levels.iter().map(|l| l.cells()).sum()
    }

    pub fn index(&self, pos: AnchorPosition) -> usize {
        let l = &self.levels[pos.level];
        l.offset + (pos.cy * l.grid + pos.cx) * ANCHORS_PER_CELL + pos.slot
    }

    pub fn position(&self, k: usize) -> AnchorPosition {
        let level = self
            .levels
            .iter()
            .rposition(|l| l.offset <= k)
            .expect("level offsets start at 0");
        let l = &self.levels[level];
        assert!(k < l.offset + l.anchor_count(), "anchor index {k} out of range");
        let local = k - l.offset;
        let cell = local / ANCHORS_PER_CELL;
        AnchorPosition {
            level,
            cx: cell % l.grid,
            cy: cell / l.grid,
            slot: local % ANCHORS_PER_CELL,
        }
    }

    pub fn placed(&self, k: usize) -> PlacedAnchor {
        let pos = self.position(k);
        let l = &self.levels[pos.level];
        let shape = l.anchors[pos.slot];
        let s = l.stride as f64;
        PlacedAnchor {
            index: k,
            level: pos.level,
            cx: pos.cx,
            cy: pos.cy,
            slot: pos.slot,
            stride: l.stride,
            shape,
            bbox: BBox::from_center(
                (pos.cx as f64 + 0.5) * s,
                (pos.cy as f64 + 0.5) * s,
                shape.w,
                shape.h,
            ),
        }
    }

    /// Every anchor in flat-index order.
    pub fn place_anchors(&self) -> Vec<PlacedAnchor> {
        (0..self.total_anchors()).map(|k| self.placed(k)).collect()
    }

    /// All nine shapes in ascending-area order.
    pub fn shapes(&self) -> Vec<AnchorShape> {
        let mut v: Vec<AnchorShape> = self.levels.iter().flat_map(|l| l.anchors).collect();
        v.sort_by(area_order);
        v
    }
}

/// Writes shapes as `w h` lines.
pub fn format_anchor_file(shapes: &[AnchorShape]) -> String {
    shapes.iter().map(|s| format!("{} {}\n", s.w, s.h)).collect()
}

pub fn parse_anchor_file(text: &str, path: &str) -> Result<Vec<AnchorShape>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: &str| Error::Parse {
            path: path.to_string(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err("expected two numbers `w h`"))?;
        if vals.len() != 2 {
            return Err(parse_err("expected two numbers `w h`"));
        }
        if !(vals[0] > 0.0 && vals[1] > 0.0) {
            return Err(parse_err("anchor sides must be positive"));
        }
        out.push(AnchorShape::new(vals[0], vals[1]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shapes(list: &[(f64, f64)]) -> Vec<AnchorShape> {
        list.iter().map(|&(w, h)| AnchorShape::new(w, h)).collect()
    }

    fn boxes_of(list: &[(f64, f64)], reps: usize) -> Vec<BBox> {
        list.iter()
            .flat_map(|&(w, h)| std::iter::repeat_n(BBox::new(0.0, 0.0, w, h), reps))
            .collect()
    }

    const REFERIT: [(f64, f64); 9] = [
        (18., 22.),
        (48., 28.),
        (29., 52.),
        (91., 48.),
        (50., 91.),
        (203., 57.),
        (96., 127.),
        (234., 100.),
        (202., 175.),
    ];
    const FLICKR: [(f64, f64); 9] = [
        (17., 16.),
        (33., 35.),
        (84., 43.),
        (50., 74.),
        (76., 126.),
        (125., 81.),
        (128., 161.),
        (227., 104.),
        (216., 180.),
    ];

    #[test]
    fn kmeans_recovers_exact_shapes() {
        let truth = [(10., 12.), (30., 15.), (60., 80.)];
        let cfg = KMeansConfig {
            k: 3,
            ..Default::default()
        };
        let r = kmeans_anchors(&boxes_of(&truth, 7), &cfg).unwrap();
        assert_eq!(r.anchors, shapes(&truth));
    }

    #[test]
    fn kmeans_single_cluster() {
        let cfg = KMeansConfig {
            k: 1,
            ..Default::default()
        };
        let r = kmeans_anchors(&boxes_of(&[(10., 10.)], 3), &cfg).unwrap();
        assert_eq!(r.anchors, shapes(&[(10., 10.)]));
    }

    #[test]
    fn kmeans_two_separable_groups_any_seed() {
        let b = boxes_of(&[(10., 10.), (100., 20.)], 50);
        for seed in 0..20 {
            for update in [CentroidUpdate::Median, CentroidUpdate::Mean] {
                let cfg = KMeansConfig {
                    k: 2,
                    seed,
                    update,
                    ..Default::default()
                };
                let r = kmeans_anchors(&b, &cfg).unwrap();
                assert_eq!(r.anchors, shapes(&[(10., 10.), (100., 20.)]), "seed {seed}");
            }
        }
    }

    #[test]
    fn kmeans_errors() {
        let cfg = KMeansConfig {
            k: 2,
            ..Default::default()
        };
        assert!(kmeans_anchors(&[], &cfg).is_err());
        assert!(kmeans_anchors(&boxes_of(&[(5., 5.)], 1), &cfg).is_err());
        // two boxes but only one distinct shape
        assert!(kmeans_anchors(&boxes_of(&[(5., 5.)], 2), &cfg).is_err());
        let degenerate = vec![BBox::new(0., 0., 0., 4.), BBox::new(0., 0., 3., 4.)];
        assert!(kmeans_anchors(&degenerate, &cfg).is_err());
    }

    #[test]
    fn kmeans_is_seed_deterministic() {
        let mut b = Vec::new();
        for i in 0..200 {
            let w = 5.0 + (i * 37 % 101) as f64;
            let h = 5.0 + (i * 53 % 97) as f64;
            b.push(BBox::new(0.0, 0.0, w, h));
        }
        let cfg = KMeansConfig {
            k: 9,
            seed: 42,
            ..Default::default()
        };
        let a = kmeans_anchors(&b, &cfg).unwrap();
        let c = kmeans_anchors(&b, &cfg).unwrap();
        assert_eq!(a.anchors, c.anchors);
        assert_eq!(a.objective_history, c.objective_history);
        for w in a.objective_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn levels_by_area_thirds() {
        let lv = assign_levels(&shapes(&REFERIT)).unwrap();
        assert_eq!(lv[0].to_vec(), shapes(&[(96., 127.), (234., 100.), (202., 175.)]));
        let lv = assign_levels(&shapes(&FLICKR)).unwrap();
        assert_eq!(lv[2].to_vec(), shapes(&[(17., 16.), (33., 35.), (84., 43.)]));
        // partition: every shape exactly once
        let mut all: Vec<AnchorShape> = lv.iter().flatten().copied().collect();
        all.sort_by(area_order);
        let mut expect = shapes(&FLICKR);
        expect.sort_by(area_order);
        assert_eq!(all, expect);
        assert!(assign_levels(&shapes(&FLICKR[..8])).is_err());
    }

    #[test]
    fn identical_shapes_split_three_ways() {
        let s = vec![AnchorShape::new(4.0, 4.0); 9];
        let lv = assign_levels(&s).unwrap();
        assert!(lv.iter().all(|t| t.len() == 3));
        assert_eq!(lv, assign_levels(&s).unwrap());
    }

    #[test]
    fn layout_counts_and_centers() {
        let l = AnchorLayout::new(256, &shapes(&REFERIT)).unwrap();
        assert_eq!(l.total_anchors(), 4032);
        assert_eq!(l.total_locations(), 1344);
        let placed = l.place_anchors();
        assert_eq!(placed.len(), 4032);
        let first = placed[0];
        assert_eq!(first.stride, 32);
        assert_eq!((first.bbox.cx(), first.bbox.cy()), (16.0, 16.0));
        let small = AnchorLayout::new(64, &shapes(&REFERIT)).unwrap();
        assert_eq!(small.total_anchors(), 252);
        assert!(AnchorLayout::new(100, &shapes(&REFERIT)).is_err());
    }

    #[test]
    fn flat_index_is_a_bijection() {
        let l = AnchorLayout::new(128, &shapes(&FLICKR)).unwrap();
        let mut seen = vec![false; l.total_anchors()];
        for (li, lev) in l.levels.iter().enumerate() {
            for cy in 0..lev.grid {
                for cx in 0..lev.grid {
                    for slot in 0..3 {
                        let pos = AnchorPosition {
                            level: li,
                            cx,
                            cy,
                            slot,
                        };
                        let k = l.index(pos);
                        assert!(!seen[k]);
                        seen[k] = true;
                        assert_eq!(l.position(k), pos);
                        let p = l.placed(k);
                        let s = lev.stride as f64;
                        assert_eq!(p.bbox.cx(), (cx as f64 + 0.5) * s);
                        assert_eq!(p.bbox.cy(), (cy as f64 + 0.5) * s);
                    }
                }
            }
        }
        assert!(seen.into_iter().all(|v| v));
    }

    #[test]
    fn anchor_file_round_trip() {
        let s = shapes(&FLICKR);
        let text = format_anchor_file(&s);
        assert_eq!(text.lines().count(), 9);
        assert_eq!(parse_anchor_file(&text, "a.txt").unwrap(), s);
        assert!(parse_anchor_file("1 2 3\n", "a.txt").is_err());
        assert!(parse_anchor_file("1 -2\n", "a.txt").is_err());
    }
}
