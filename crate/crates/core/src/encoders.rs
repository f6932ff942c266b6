//! Visual and query feature providers.
//!
//! Two interchangeable sources feed the model: small trainable toy encoders
//! that work directly on rasters and token ids, and frozen tensors read from
//! feature-blob files computed elsewhere.
//!
//! Feature-blob layout (integers little-endian `u32`, values `f64` LE):
//!
//! ```text
//! magic "G1FB" | version | kind (0 = pyramid, 1 = query) | tensor count
//! per tensor: rank | dims... | values
//! ```
//!
//! A pyramid blob holds three rank-2 `[cells, width]` tensors in level order
//! (stride 32, 16, 8); a query blob holds one rank-1 `[E]` tensor. Files are
//! named `<sample id>.g1fb`.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::Rng;

use crate::anchors::{AnchorLayout, STRIDES};
use crate::autodiff::{Graph, NodeId, GATHER_ZERO};
use crate::checkpoint::{put_tensor_body, put_u32, Reader};
use crate::data::Raster;
use crate::error::{open, Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BLOB_MAGIC: &[u8; 4] = b"G1FB";
pub const BLOB_VERSION: u32 = 1;

/// Raw per-level features in level order (stride 32, 16, 8); each tensor is
/// `[cells, width]` with cells in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 3],
}

impl FeaturePyramid {
    pub fn widths(&self) -> [usize; 3] {
        [0, 1, 2].map(|l| self.levels[l].rows_cols().1)
    }

    /// Checks the cell counts against the layout grids.
    pub fn check_layout(&self, layout: &AnchorLayout) -> Result<()> {
        for (l, t) in self.levels.iter().enumerate() {
            let cells = layout.levels[l].cells();
            if t.rank() != 2 || t.shape()[0] != cells {
                return Err(Error::shape("feature pyramid level", t.shape(), &[cells, t.rows_cols().1]));
            }
        }
        Ok(())
    }

    /// Mirrors every level left-to-right.
    pub fn flip_horizontal(&self) -> FeaturePyramid {
        let levels = [0, 1, 2].map(|l| {
            let t = &self.levels[l];
            let (cells, w) = t.rows_cols();
            let g = (cells as f64).sqrt().round() as usize;
            let mut out = vec![0.0; t.len()];
            for y in 0..g {
                for x in 0..g {
                    let src = (y * g + x) * w;
                    let dst = (y * g + (g - 1 - x)) * w;
                    out[dst..dst + w].copy_from_slice(&t.data()[src..src + w]);
                }
            }
            Tensor::new(t.shape().to_vec(), out).expect("same shape")
        });
        FeaturePyramid { levels }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlobKind {
    Pyramid,
    Query,
}

impl BlobKind {
    fn code(self) -> u32 {
        match self {
            BlobKind::Pyramid => 0,
            BlobKind::Query => 1,
        }
    }
}

fn encode_blob(kind: BlobKind, tensors: &[&Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BLOB_MAGIC);
    put_u32(&mut out, BLOB_VERSION);
    put_u32(&mut out, kind.code());
    put_u32(&mut out, tensors.len() as u32);
    for t in tensors {
        put_tensor_body(&mut out, t);
    }
    out
}

pub fn encode_pyramid_blob(p: &FeaturePyramid) -> Vec<u8> {
    encode_blob(BlobKind::Pyramid, &[&p.levels[0], &p.levels[1], &p.levels[2]])
}

pub fn encode_query_blob(q: &Tensor) -> Vec<u8> {
    encode_blob(BlobKind::Query, &[q])
}

fn decode_blob(buf: &[u8], expect: BlobKind) -> Result<Vec<Tensor>> {
    let mut r = Reader::new(buf);
    if r.take(4, "magic")? != BLOB_MAGIC {
        return Err(Error::format("feature blob field `magic`: expected G1FB"));
    }
    let version = r.u32("version")?;
    if version != BLOB_VERSION {
        return Err(Error::format(format!("feature blob field `version`: unsupported {version}")));
    }
    let kind = r.u32("kind")?;
    if kind != expect.code() {
        return Err(Error::format(format!(
            "feature blob field `kind`: expected {} for a {expect:?} blob, found {kind}",
            expect.code()
        )));
    }
    let (want_count, want_rank) = match expect {
        BlobKind::Pyramid => (3, 2),
        BlobKind::Query => (1, 1),
    };
    let count = r.u32("count")?;
    if count != want_count {
        return Err(Error::format(format!(
            "feature blob field `count`: expected {want_count}, found {count}"
        )));
    }
    let mut out = Vec::new();
    for i in 0..count {
        let t = r.tensor_body(&format!("tensor {i}"))?;
        if t.rank() != want_rank {
            return Err(Error::format(format!(
                "feature blob field `tensor {i} rank`: expected {want_rank}, found {}",
                t.rank()
            )));
        }
        if !t.is_finite() {
            return Err(Error::format(format!("feature blob field `tensor {i} values`: non-finite")));
        }
        out.push(t);
    }
    r.finish()?;
    Ok(out)
}

pub fn decode_pyramid_blob(buf: &[u8]) -> Result<FeaturePyramid> {
    let mut v = decode_blob(buf, BlobKind::Pyramid)?.into_iter();
    let levels = [0, 1, 2].map(|_| v.next().expect("three tensors"));
    Ok(FeaturePyramid { levels })
}

pub fn decode_query_blob(buf: &[u8]) -> Result<Tensor> {
    Ok(decode_blob(buf, BlobKind::Query)?.remove(0))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::File::create(path)?.write_all(bytes)?;
    Ok(())
}

pub fn blob_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.g1fb"))
}

/// Reads frozen per-sample features from blob directories.
#[derive(Debug, Clone, Default)]
pub struct FileFeatureProvider {
    pub pyramid_dir: Option<PathBuf>,
    pub query_dir: Option<PathBuf>,
}

impl FileFeatureProvider {
    pub fn load_pyramid(&self, id: &str) -> Result<FeaturePyramid> {
        let dir = self
            .pyramid_dir
            .as_ref()
            .ok_or_else(|| Error::Config("no pyramid feature directory configured".into()))?;
        let path = blob_path(dir, id);
        decode_pyramid_blob(&read_bytes(&path)?)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }

    pub fn load_query(&self, id: &str) -> Result<Tensor> {
        let dir = self
            .query_dir
            .as_ref()
            .ok_or_else(|| Error::Config("no query feature directory configured".into()))?;
        let path = blob_path(dir, id);
        decode_query_blob(&read_bytes(&path)?)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }

    pub fn write_pyramid(dir: &Path, id: &str, p: &FeaturePyramid) -> Result<()> {
        write_bytes(&blob_path(dir, id), &encode_pyramid_blob(p))
    }

    pub fn write_query(dir: &Path, id: &str, q: &Tensor) -> Result<()> {
        write_bytes(&blob_path(dir, id), &encode_query_blob(q))
    }
}

/// Builds the im2col table of a `k x k`, stride-`s`, padding-`p` window over
/// a `g x g` grid with `c` channels, producing `[out_g * out_g, k * k * c]`.
fn window_index(g: usize, c: usize, k: usize, s: usize, p: usize) -> (usize, Rc<[u32]>) {
    let out_g = (g + 2 * p - k) / s + 1;
    let mut idx = Vec::with_capacity(out_g * out_g * k * k * c);
    for oy in 0..out_g {
        for ox in 0..out_g {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let ix = (ox * s + kx) as isize - p as isize;
                    let inside = iy >= 0 && ix >= 0 && (iy as usize) < g && (ix as usize) < g;
                    for ch in 0..c {
                        idx.push(if inside {
                            ((iy as usize * g + ix as usize) * c + ch) as u32
                        } else {
                            GATHER_ZERO
                        });
                    }
                }
            }
        }
    }
    (out_g, idx.into())
}

struct Stage {
    w: ParamId,
    b: ParamId,
    index: Rc<[u32]>,
    grid: usize,
    fan_in: usize,
}

/// Four strided affine+ReLU stages over image windows:
/// 4x4 patches at stride 4, then three 4x4/stride-2 windows producing the
/// stride 8, 16 and 32 grids.
pub struct ToyVisualEncoder {
    input_size: usize,
    channels: [usize; 4],
    stages: Vec<Stage>,
}

pub const RASTER_CHANNELS: usize = 3;

impl ToyVisualEncoder {
    pub fn new<R: Rng>(
        input_size: u32,
        channels: [usize; 4],
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let s = input_size as usize;
        if s == 0 || s % STRIDES[0] as usize != 0 {
            return Err(Error::Config(format!(
                "input_size {input_size} must be a positive multiple of 32"
            )));
        }
        if channels.contains(&0) {
            return Err(Error::Config("visual encoder channel widths must be positive".into()));
        }
        let mut stages = Vec::new();
        let (mut g, mut c) = (s, RASTER_CHANNELS);
        for (i, &out) in channels.iter().enumerate() {
            let (k, st, p) = if i == 0 { (4, 4, 0) } else { (4, 2, 1) };
            let (out_g, index) = window_index(g, c, k, st, p);
            let fan_in = k * k * c;
            let w = store.add_weight(&format!("visual.s{i}.w"), fan_in, out, ParamGroup::Backbone, rng);
            let b = store.add_bias(&format!("visual.s{i}.b"), out, 0.0, ParamGroup::Backbone);
            stages.push(Stage {
                w,
                b,
                index,
                grid: out_g,
                fan_in,
            });
            g = out_g;
            c = out;
        }
        Ok(ToyVisualEncoder {
            input_size: s,
            channels,
            stages,
        })
    }

    /// Raw widths in level order (stride 32, 16, 8).
    pub fn widths(&self) -> [usize; 3] {
        [self.channels[3], self.channels[2], self.channels[1]]
    }

    /// Raster values centered around zero, as a `[pixels, 3]` tensor.
    pub fn input_tensor(&self, raster: &Raster) -> Result<Tensor> {
        if raster.width != self.input_size
            || raster.height != self.input_size
            || raster.channels != RASTER_CHANNELS
        {
            return Err(Error::shape(
                "toy visual encoder input",
                &[raster.height, raster.width, raster.channels],
                &[self.input_size, self.input_size, RASTER_CHANNELS],
            ));
        }
        let data = raster.data.iter().map(|&v| v as f64 - 0.5).collect();
        Tensor::new(vec![self.input_size * self.input_size, RASTER_CHANNELS], data)
    }

    /// Level nodes in order (stride 32, 16, 8), each `[cells, width]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, raster: &Raster) -> Result<[NodeId; 3]> {
        let input = g.constant(self.input_tensor(raster)?);
        let mut x = input;
        let mut outs = Vec::with_capacity(4);
        for st in &self.stages {
            let cols = g.gather(x, st.index.clone(), vec![st.grid * st.grid, st.fan_in])?;
            let w = g.param(store, st.w);
            let b = g.param(store, st.b);
            let y = g.linear(cols, w, Some(b))?;
            x = g.relu(y);
            outs.push(x);
        }
        Ok([outs[3], outs[2], outs[1]])
    }
}

/// Query branch: optional learned token table (mean pooled) followed by two
/// affine layers to width `d`, ReLU after the first only.
pub struct QueryEncoder {
    embed: Option<ParamId>,
    vocab_size: usize,
    width: usize,
    p1: (ParamId, ParamId),
    p2: (ParamId, ParamId),
}

impl QueryEncoder {
    /// `vocab_size = Some(v)` builds the toy token encoder with a `[v, width]`
    /// table; `None` expects precomputed `width`-wide embeddings.
    pub fn new<R: Rng>(
        vocab_size: Option<usize>,
        width: usize,
        d: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if width == 0 || d == 0 {
            return Err(Error::Config("query widths must be positive".into()));
        }
        let embed = match vocab_size {
            Some(0) => return Err(Error::Config("vocabulary is empty".into())),
            Some(v) => {
                let id = store.add_normal("text.embed", &[v, width], 1.0, ParamGroup::Main, rng);
                Some(id)
            }
            None => None,
        };
        let p1 = (
            store.add_weight("query.p1.w", width, d, ParamGroup::Main, rng),
            store.add_bias("query.p1.b", d, 0.0, ParamGroup::Main),
        );
        let p2 = (
            store.add_weight("query.p2.w", d, d, ParamGroup::Main, rng),
            store.add_bias("query.p2.b", d, 0.0, ParamGroup::Main),
        );
        Ok(QueryEncoder {
            embed,
            vocab_size: vocab_size.unwrap_or(0),
            width,
            p1,
            p2,
        })
    }

    pub fn input_width(&self) -> usize {
        self.width
    }

    pub fn has_token_table(&self) -> bool {
        self.embed.is_some()
    }

    /// Mean of the token rows; ids outside the vocabulary map to 0 (UNK).
    pub fn embed_tokens(&self, g: &mut Graph, store: &ParamStore, tokens: &[usize]) -> Result<NodeId> {
        let table = self
            .embed
            .ok_or_else(|| Error::Config("query encoder has no token table".into()))?;
        let ids: Vec<usize> = if tokens.is_empty() { vec![0] } else { tokens.to_vec() };
        let mut idx = Vec::with_capacity(ids.len() * self.width);
        for &t in &ids {
            let t = if t < self.vocab_size { t } else { 0 };
            idx.extend((0..self.width).map(|c| (t * self.width + c) as u32));
        }
        let tab = g.param(store, table);
        let rows = g.gather(tab, idx.into(), vec![ids.len(), self.width])?;
        Ok(g.mean_rows(rows))
    }

    /// Projects a `[width]` embedding node to `[d]`.
    pub fn project(&self, g: &mut Graph, store: &ParamStore, e: NodeId) -> Result<NodeId> {
        let n = g.value(e).len();
        if n != self.width {
            return Err(Error::shape("query embedding", &[n], &[self.width]));
        }
        let (w1, b1) = (g.param(store, self.p1.0), g.param(store, self.p1.1));
        let h = g.linear(e, w1, Some(b1))?;
        let h = g.relu(h);
        let (w2, b2) = (g.param(store, self.p2.0), g.param(store, self.p2.1));
        g.linear(h, w2, Some(b2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pyramid() -> FeaturePyramid {
        let mk = |cells: usize, w: usize, s: f64| {
            Tensor::new(vec![cells, w], (0..cells * w).map(|i| (i as f64 * s).sin()).collect()).unwrap()
        };
        FeaturePyramid {
            levels: [mk(4, 3, 0.7), mk(16, 2, 1.3), mk(64, 5, -0.1)],
        }
    }

    #[test]
    fn blob_round_trip_is_bit_exact() {
        let p = pyramid();
        assert_eq!(decode_pyramid_blob(&encode_pyramid_blob(&p)).unwrap(), p);
        let q = Tensor::from_vec(vec![0.1, -2.5e-300, 7.0]);
        assert_eq!(decode_query_blob(&encode_query_blob(&q)).unwrap(), q);
    }

    #[test]
    fn blob_errors_name_the_field() {
        let q = Tensor::from_vec(vec![1.0; 4]);
        let mut buf = encode_query_blob(&q);
        let err = decode_pyramid_blob(&buf).unwrap_err().to_string();
        assert!(err.contains("`kind`"), "{err}");
        buf[0] = b'X';
        assert!(decode_query_blob(&buf).unwrap_err().to_string().contains("`magic`"));
        // rank-2 query tensor
        let wrong = encode_blob(BlobKind::Query, &[&Tensor::zeros(&[2, 2])]);
        let err = decode_query_blob(&wrong).unwrap_err().to_string();
        assert!(err.contains("rank"), "{err}");
    }

    #[test]
    fn toy_visual_shapes_match_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = ToyVisualEncoder::new(64, [4, 6, 7, 8], &mut store, &mut rng).unwrap();
        let mut g = Graph::new();
        let raster = Raster::new(64, 64, 3);
        let out = enc.forward(&mut g, &store, &raster).unwrap();
        let expect = [(4, 8), (16, 7), (64, 6)];
        for (n, (cells, w)) in out.iter().zip(expect) {
            assert_eq!(g.value(*n).shape(), &[cells, w]);
            assert!(g.value(*n).is_finite());
        }
        assert!(enc.forward(&mut g, &store, &Raster::new(32, 32, 3)).is_err());
        assert!(store.num_scalars() < 50_000);
    }

    #[test]
    fn token_mean_is_order_free_and_unk_safe() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let q = QueryEncoder::new(Some(5), 4, 6, &mut store, &mut rng).unwrap();
        let run = |toks: &[usize]| {
            let mut g = Graph::new();
            let e = q.embed_tokens(&mut g, &store, toks).unwrap();
            let p = q.project(&mut g, &store, e).unwrap();
            g.value(p).data().to_vec()
        };
        let a = run(&[1, 2, 3]);
        let b = run(&[3, 1, 2]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(run(&[99]), run(&[0]));
    }

    #[test]
    fn flip_pyramid_is_involution() {
        let p = pyramid();
        assert_eq!(p.flip_horizontal().flip_horizontal(), p);
        assert_ne!(p.flip_horizontal(), p);
    }
}
