//! Deterministic synthetic grounding scenes.
//!
//! Scenes hold a few flat-colored rectangles on a dark background. Queries
//! come from the grammar `[color] [shape] [qualifier]`, where the qualifier
//! names the half of the image (left, right, top, bottom) the object lies
//! strictly inside. Every emitted query has exactly one referent.
//!
//! Two profiles are provided. `Spatial` scenes always contain a twin pair
//! (same color and shape) in opposite halves, so the qualifier is needed to
//! pick the referent. `Appearance` scenes give every object a distinct
//! color/shape pair and never use qualifiers.

use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorLayout;
use crate::data::{tokenize, AnnotationRecord, Raster};
use crate::encoders::FeaturePyramid;
use crate::error::{Error, Result};
use crate::geometry::{iou, letterbox, BBox};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Square,
    Bar,
    Column,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Qualifier {
    Left,
    Right,
    Top,
    Bottom,
}

pub const COLORS: [Color; 3] = [Color::Red, Color::Green, Color::Blue];
pub const SHAPES: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Bar, ShapeKind::Column];
pub const QUALIFIERS: [Qualifier; 4] = [Qualifier::Left, Qualifier::Right, Qualifier::Top, Qualifier::Bottom];

impl Color {
    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.15, 0.15],
            Color::Green => [0.15, 0.8, 0.2],
            Color::Blue => [0.2, 0.3, 0.95],
        }
    }
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Bar => "bar",
            ShapeKind::Column => "column",
        }
    }

    /// Width and height factors relative to the size class.
    pub fn aspect(self) -> (f64, f64) {
        match self {
            ShapeKind::Square => (1.0, 1.0),
            ShapeKind::Bar => (1.6, 0.6),
            ShapeKind::Column => (0.6, 1.6),
        }
    }
}

impl Qualifier {
    pub fn name(self) -> &'static str {
        match self {
            Qualifier::Left => "left",
            Qualifier::Right => "right",
            Qualifier::Top => "top",
            Qualifier::Bottom => "bottom",
        }
    }

    pub fn opposite(self) -> Qualifier {
        match self {
            Qualifier::Left => Qualifier::Right,
            Qualifier::Right => Qualifier::Left,
            Qualifier::Top => Qualifier::Bottom,
            Qualifier::Bottom => Qualifier::Top,
        }
    }

    pub fn is_lateral(self) -> bool {
        matches!(self, Qualifier::Left | Qualifier::Right)
    }

    /// Whether `b` lies strictly inside this half of a `w x h` image.
    pub fn holds(self, b: &BBox, w: f64, h: f64) -> bool {
        match self {
            Qualifier::Left => b.x2 < w / 2.0,
            Qualifier::Right => b.x1 > w / 2.0,
            Qualifier::Top => b.y2 < h / 2.0,
            Qualifier::Bottom => b.y1 > h / 2.0,
        }
    }
}

/// Tokens whose meaning flips under a horizontal mirror.
pub fn has_lateral_token(query: &str) -> bool {
    tokenize(query).iter().any(|t| t == "left" || t == "right")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Spatial,
    Appearance,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Spatial => "spatial",
            Profile::Appearance => "appearance",
        })
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(Profile::Spatial),
            "appearance" => Ok(Profile::Appearance),
            _ => Err(Error::Config(format!("unknown profile `{s}` (spatial|appearance)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub profile: Profile,
    /// Network input size the object sizes are expressed in.
    pub input_size: u32,
    /// Original images are `long_edge` wide and between `min_height` and
    /// `long_edge` tall.
    pub long_edge: u32,
    pub min_height: u32,
    /// Base object sizes in network-frame pixels, one per size class.
    pub sizes: [f64; 3],
    /// Relative per-axis size jitter.
    pub jitter: f64,
    /// Extra objects beyond the referents.
    pub max_distractors: usize,
    /// Upper bound on the IoU of any two objects in a scene.
    pub max_iou: f64,
    pub queries_per_object: usize,
    /// Samples kept per scene, in referent order.
    pub queries_per_scene: usize,
    /// Pitch in network-frame pixels of the lattice whose cell centers
    /// object centers snap to; 0 places objects freely.
    pub center_lattice: f64,
    pub id_prefix: String,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            profile: Profile::Spatial,
            input_size: 64,
            long_edge: 96,
            min_height: 80,
            sizes: [8.0, 13.0, 20.0],
            jitter: 0.05,
            max_distractors: 1,
            max_iou: 0.1,
            queries_per_object: 2,
            queries_per_scene: 3,
            center_lattice: 8.0,
            id_prefix: "s".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub color: Color,
    pub shape: ShapeKind,
    /// Original-frame box.
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub key: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<SceneObject>,
    pub distractors: usize,
}

pub const BACKGROUND: [f32; 3] = [0.1, 0.1, 0.1];

impl SyntheticScene {
    /// Draws the objects in order over the background; edge pixels blend
    /// by covered area.
    pub fn render(&self) -> Raster {
        let mut r = Raster::new(self.width as usize, self.height as usize, 3);
        for px in r.data.chunks_mut(3) {
            px.copy_from_slice(&BACKGROUND);
        }
        let overlap = |p: usize, lo: f64, hi: f64| (hi.min(p as f64 + 1.0) - lo.max(p as f64)).max(0.0) as f32;
        for o in &self.objects {
            let rgb = o.color.rgb();
            let b = o.bbox;
            for y in b.y1.floor() as usize..(b.y2.ceil() as usize).min(r.height) {
                let cy = overlap(y, b.y1, b.y2);
                for x in b.x1.floor() as usize..(b.x2.ceil() as usize).min(r.width) {
                    let cov = cy * overlap(x, b.x1, b.x2);
                    for (c, v) in rgb.iter().enumerate() {
                        let old = r.at(x, y, c);
                        r.set(x, y, c, old + (v - old) * cov);
                    }
                }
            }
        }
        r
    }

    /// Indices of the objects a query describes.
    pub fn referents(&self, query: &str) -> Vec<usize> {
        let Some(parsed) = ParsedQuery::parse(query) else {
            return Vec::new();
        };
        (0..self.objects.len())
            .filter(|&i| parsed.matches(&self.objects[i], self.width as f64, self.height as f64))
            .collect()
    }
}

/// A query decomposed into optional grammar slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ParsedQuery {
    color: Option<Color>,
    shape: Option<ShapeKind>,
    qualifier: Option<Qualifier>,
}

impl ParsedQuery {
    fn parse(query: &str) -> Option<ParsedQuery> {
        let mut q = ParsedQuery {
            color: None,
            shape: None,
            qualifier: None,
        };
        for tok in tokenize(query) {
            if let Some(c) = COLORS.iter().find(|c| c.name() == tok) {
                q.color.replace(*c).is_none().then_some(())?;
            } else if let Some(s) = SHAPES.iter().find(|s| s.name() == tok) {
                q.shape.replace(*s).is_none().then_some(())?;
            } else if let Some(l) = QUALIFIERS.iter().find(|l| l.name() == tok) {
                q.qualifier.replace(*l).is_none().then_some(())?;
            } else {
                return None;
            }
        }
        Some(q)
    }

    fn matches(&self, o: &SceneObject, w: f64, h: f64) -> bool {
        self.color.is_none_or(|c| c == o.color)
            && self.shape.is_none_or(|s| s == o.shape)
            && self.qualifier.is_none_or(|q| q.holds(&o.bbox, w, h))
    }

    fn text(&self) -> String {
        let parts: Vec<&str> = [
            self.color.map(Color::name),
            self.shape.map(ShapeKind::name),
            self.qualifier.map(Qualifier::name),
        ]
        .into_iter()
        .flatten()
        .collect();
        parts.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub id: String,
    pub scene: usize,
    pub query: String,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub scenes: Vec<SyntheticScene>,
    pub samples: Vec<SyntheticSample>,
}

impl SyntheticDataset {
    /// Annotation records; `image_dir` adds `image` paths of the form
    /// `<image_dir>/<scene key>.png`.
    pub fn records(&self, image_dir: Option<&str>) -> Vec<AnnotationRecord> {
        self.samples
            .iter()
            .map(|s| {
                let scene = &self.scenes[s.scene];
                let b = scene.objects[s.target].bbox;
                AnnotationRecord {
                    id: s.id.clone(),
                    image_w: scene.width,
                    image_h: scene.height,
                    query: s.query.clone(),
                    bbox: [b.x1, b.y1, b.x2, b.y2],
                    image: image_dir.map(|d| format!("{d}/{}.png", scene.key)),
                }
            })
            .collect()
    }
}

const PLACE_ATTEMPTS: usize = 200;
const SCENE_ATTEMPTS: usize = 100;

struct SceneBuilder<'a> {
    cfg: &'a SyntheticConfig,
    width: u32,
    height: u32,
    scale: f64,
    pad: (f64, f64),
    objects: Vec<SceneObject>,
}

impl SceneBuilder<'_> {
    fn object_size(&self, shape: ShapeKind, rng: &mut ChaCha8Rng) -> (f64, f64) {
        let base = *self.cfg.sizes.choose(rng).expect("three size classes");
        let (fw, fh) = shape.aspect();
        let j = self.cfg.jitter;
        let jw = 1.0 + rng.random_range(-j..=j);
        let jh = 1.0 + rng.random_range(-j..=j);
        (base * fw * jw / self.scale, base * fh * jh / self.scale)
    }

    /// Places an object whose box satisfies `region` and respects the IoU cap.
    fn place(
        &mut self,
        color: Color,
        shape: ShapeKind,
        region: Option<Qualifier>,
        rng: &mut ChaCha8Rng,
    ) -> bool {
        let (w, h) = (self.width as f64, self.height as f64);
        for _ in 0..PLACE_ATTEMPTS {
            let (bw, bh) = self.object_size(shape, rng);
            if bw >= w || bh >= h {
                continue;
            }
            let mut x1 = rng.random_range(0.0..=w - bw);
            let mut y1 = rng.random_range(0.0..=h - bh);
            let pitch = self.cfg.center_lattice;
            if pitch > 0.0 {
                // move the center to the nearest lattice cell center in the
                // network frame, then back to original pixels
                let snap = |c: f64, pad: f64| {
                    (((c * self.scale + pad) / pitch).floor() * pitch + pitch / 2.0 - pad) / self.scale
                };
                x1 = snap(x1 + bw / 2.0, self.pad.0) - bw / 2.0;
                y1 = snap(y1 + bh / 2.0, self.pad.1) - bh / 2.0;
                if x1 < 0.0 || y1 < 0.0 || x1 + bw > w || y1 + bh > h {
                    continue;
                }
            }
            let b = BBox::new(x1, y1, x1 + bw, y1 + bh);
            if region.is_some_and(|q| !q.holds(&b, w, h)) {
                continue;
            }
            if self.objects.iter().any(|o| iou(&o.bbox, &b) > self.cfg.max_iou) {
                continue;
            }
            self.objects.push(SceneObject { color, shape, bbox: b });
            return true;
        }
        false
    }
}

fn unique_queries(scene: &SyntheticScene, target: usize, templates: &[ParsedQuery]) -> Vec<String> {
    templates
        .iter()
        .map(ParsedQuery::text)
        .filter(|q| scene.referents(q) == [target])
        .collect()
}

/// Builds one scene and its queries, or `None` when placement failed.
fn try_scene(
    cfg: &SyntheticConfig,
    key: String,
    rng: &mut ChaCha8Rng,
) -> Option<(SyntheticScene, Vec<(usize, String)>)> {
    let width = cfg.long_edge;
    let height = rng.random_range(cfg.min_height..=cfg.long_edge);
    let lb = letterbox(width, height, cfg.input_size).ok()?;
    let scale = lb.scale;
    let mut b = SceneBuilder {
        cfg,
        width,
        height,
        scale,
        pad: (lb.pad_x, lb.pad_y),
        objects: Vec::new(),
    };
    let distractors = rng.random_range(0..=cfg.max_distractors);
    let mut referents = Vec::new();
    match cfg.profile {
        Profile::Spatial => {
            let color = *COLORS.choose(rng)?;
            let shape = *SHAPES.choose(rng)?;
            let q = *QUALIFIERS.choose(rng)?;
            if !b.place(color, shape, Some(q), rng) || !b.place(color, shape, Some(q.opposite()), rng) {
                return None;
            }
            referents.push((0, q));
            referents.push((1, q.opposite()));
            for _ in 0..distractors {
                // distractors never share the referents' color
                let others: Vec<Color> = COLORS.iter().copied().filter(|&c| c != color).collect();
                let (c, s) = (*others.choose(rng)?, *SHAPES.choose(rng)?);
                if !b.place(c, s, None, rng) {
                    return None;
                }
            }
        }
        Profile::Appearance => {
            let mut pairs: Vec<(Color, ShapeKind)> = COLORS
                .iter()
                .flat_map(|&c| SHAPES.iter().map(move |&s| (c, s)))
                .collect();
            pairs.shuffle(rng);
            for &(c, s) in pairs.iter().take(2 + distractors) {
                if !b.place(c, s, None, rng) {
                    return None;
                }
            }
            referents.push((0, Qualifier::Left));
            referents.push((1, Qualifier::Left));
        }
    }
    let scene = SyntheticScene {
        key,
        width,
        height,
        objects: b.objects,
        distractors,
    };
    let mut per_referent = Vec::new();
    for (idx, q) in referents {
        let o = &scene.objects[idx];
        let (c, s) = (Some(o.color), Some(o.shape));
        let templates: Vec<ParsedQuery> = match cfg.profile {
            Profile::Spatial => {
                let q = Some(q);
                vec![
                    ParsedQuery { color: c, shape: s, qualifier: q },
                    ParsedQuery { color: None, shape: s, qualifier: q },
                    ParsedQuery { color: c, shape: None, qualifier: q },
                ]
            }
            Profile::Appearance => vec![
                ParsedQuery { color: c, shape: s, qualifier: None },
                ParsedQuery { color: c, shape: None, qualifier: None },
                ParsedQuery { color: None, shape: s, qualifier: None },
            ],
        };
        let mut found = unique_queries(&scene, idx, &templates);
        // the full description must resolve, otherwise the scene is redrawn
        if found.first() != Some(&templates[0].text()) {
            return None;
        }
        let full = found.remove(0);
        found.shuffle(rng);
        found.truncate(cfg.queries_per_object - 1);
        found.insert(0, full);
        per_referent.push((idx, found));
    }
    // first queries of every referent, then second queries, and so on, so a
    // small per-scene budget still covers both referents
    let mut queries = Vec::new();
    for rank in 0..cfg.queries_per_object {
        for (idx, list) in &per_referent {
            if let Some(q) = list.get(rank) {
                queries.push((*idx, q.clone()));
            }
        }
    }
    Some((scene, queries))
}

/// Generates `count` samples; identical `(count, seed, config)` always yield
/// the identical dataset.
pub fn generate(count: usize, seed: u64, cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    if cfg.queries_per_object == 0 || cfg.queries_per_scene == 0 {
        return Err(Error::Config("queries_per_object and queries_per_scene must be at least 1".into()));
    }
    if !(cfg.center_lattice >= 0.0) || !cfg.center_lattice.is_finite() {
        return Err(Error::Config("center_lattice must be finite and non-negative".into()));
    }
    if !(0.0..1.0).contains(&cfg.jitter) || !(0.0..=1.0).contains(&cfg.max_iou) {
        return Err(Error::Config("jitter must be in [0, 1) and max_iou in [0, 1]".into()));
    }
    if cfg.min_height == 0 || cfg.min_height > cfg.long_edge {
        return Err(Error::Config("min_height must be in [1, long_edge]".into()));
    }
    let mut scenes = Vec::new();
    let mut samples = Vec::new();
    while samples.len() < count {
        let index = scenes.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let key = format!("{}img{index:06}", cfg.id_prefix);
        let mut built = None;
        for _ in 0..SCENE_ATTEMPTS {
            built = try_scene(cfg, key.clone(), &mut rng);
            if built.is_some() {
                break;
            }
        }
        let (scene, queries) = built.ok_or_else(|| {
            Error::Config(format!(
                "could not place objects after {SCENE_ATTEMPTS} attempts; \
                 reduce object sizes, distractors or the IoU cap"
            ))
        })?;
        for (target, query) in queries.into_iter().take(cfg.queries_per_scene) {
            if samples.len() == count {
                break;
            }
            samples.push(SyntheticSample {
                id: format!("{}{:06}", cfg.id_prefix, samples.len()),
                scene: index,
                query,
                target,
            });
        }
        scenes.push(scene);
    }
    Ok(SyntheticDataset {
        config: cfg.clone(),
        scenes,
        samples,
    })
}

/// Vocabulary of the synthetic grammar, in a fixed order.
pub fn grammar_tokens() -> Vec<&'static str> {
    COLORS
        .iter()
        .map(|c| c.name())
        .chain(SHAPES.iter().map(|s| s.name()))
        .chain(QUALIFIERS.iter().map(|q| q.name()))
        .collect()
}

/// Bag-of-words query embedding over [`grammar_tokens`], for writing
/// precomputed query blobs.
pub fn bag_of_words(query: &str) -> Tensor {
    let vocab = grammar_tokens();
    let mut v = vec![0.0; vocab.len()];
    for tok in tokenize(query) {
        if let Some(i) = vocab.iter().position(|t| *t == tok) {
            v[i] += 1.0;
        }
    }
    Tensor::from_vec(v)
}

/// Hand-crafted pyramid for provider-bypass runs: each cell holds the mean
/// color of its four quadrants (12 values).
pub fn descriptor_pyramid(raster: &Raster, layout: &AnchorLayout) -> Result<FeaturePyramid> {
    let size = layout.input_size as usize;
    if raster.width != size || raster.height != size || raster.channels != 3 {
        return Err(Error::shape(
            "descriptor raster",
            &[raster.height, raster.width, raster.channels],
            &[size, size, 3],
        ));
    }
    let levels = [0, 1, 2].map(|l| {
        let level = &layout.levels[l];
        let stride = level.stride as usize;
        let half = (stride / 2).max(1);
        let mut data = Vec::with_capacity(level.cells() * 12);
        for cy in 0..level.grid {
            for cx in 0..level.grid {
                for (qy, qx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let (x0, y0) = (cx * stride + qx * half, cy * stride + qy * half);
                    let mut sum = [0.0f64; 3];
                    for y in y0..y0 + half {
                        for x in x0..x0 + half {
                            for (c, s) in sum.iter_mut().enumerate() {
                                *s += raster.at(x, y, c) as f64;
                            }
                        }
                    }
                    data.extend(sum.iter().map(|s| s / (half * half) as f64));
                }
            }
        }
        Tensor::new(vec![level.cells(), 12], data).expect("cells x 12")
    });
    Ok(FeaturePyramid { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn every_query_has_one_referent() {
        for profile in [Profile::Spatial, Profile::Appearance] {
            let cfg = SyntheticConfig {
                profile,
                max_distractors: 2,
                ..Default::default()
            };
            let ds = generate(300, 5, &cfg).unwrap();
            assert_eq!(ds.samples.len(), 300);
            for s in &ds.samples {
                let scene = &ds.scenes[s.scene];
                assert_eq!(scene.referents(&s.query), vec![s.target], "{}", s.query);
                if profile == Profile::Appearance {
                    assert!(QUALIFIERS.iter().all(|q| !s.query.contains(q.name())));
                }
            }
            for scene in &ds.scenes {
                for (i, a) in scene.objects.iter().enumerate() {
                    for b in &scene.objects[i + 1..] {
                        assert!(iou(&a.bbox, &b.bbox) <= cfg.max_iou);
                    }
                }
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SyntheticConfig::default();
        let a = generate(50, 9, &cfg).unwrap();
        let b = generate(50, 9, &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(generate(50, 10, &cfg).unwrap(), a);
    }

    #[test]
    fn classes_are_balanced() {
        let ds = generate(4000, 1, &SyntheticConfig::default()).unwrap();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in &ds.samples {
            let o = &ds.scenes[s.scene].objects[s.target];
            *counts.entry(o.color.name()).or_default() += 1;
            *counts.entry(o.shape.name()).or_default() += 1;
            let q = QUALIFIERS.iter().find(|q| s.query.ends_with(q.name())).unwrap();
            *counts.entry(q.name()).or_default() += 1;
        }
        let n = ds.samples.len() as f64;
        for c in COLORS {
            let f = counts[c.name()] as f64 / (n / 3.0);
            assert!((0.8..=1.2).contains(&f), "{} {f}", c.name());
        }
        for s in SHAPES {
            let f = counts[s.name()] as f64 / (n / 3.0);
            assert!((0.8..=1.2).contains(&f), "{} {f}", s.name());
        }
        for q in QUALIFIERS {
            let f = counts[q.name()] as f64 / (n / 4.0);
            assert!((0.8..=1.2).contains(&f), "{} {f}", q.name());
        }
    }

    #[test]
    fn impossible_config_errors() {
        let cfg = SyntheticConfig {
            sizes: [60.0, 60.0, 60.0],
            ..Default::default()
        };
        assert!(matches!(generate(4, 0, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn matcher_rejects_foreign_tokens() {
        let ds = generate(4, 0, &SyntheticConfig::default()).unwrap();
        assert!(ds.scenes[0].referents("purple square").is_empty());
        assert!(ds.scenes[0].referents("red red").is_empty());
    }
}
