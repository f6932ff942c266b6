//! Rasters, letterbox resampling and the line-oriented annotation format.
//!
//! Annotation files hold one JSON object per line:
//!
//! ```text
//! {"id": "s000001", "image_w": 96, "image_h": 80, "query": "red square left",
//!  "box": [x1, y1, x2, y2], "image": "images/000001.png"}
//! ```
//!
//! `box` is in original-image pixels. `image` is optional and, when present,
//! is a PNG path relative to the annotation file's directory.

use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{open, read_to_string, Error, Result};
use crate::geometry::{BBox, LetterboxTransform};

/// Interleaved `[y][x][channel]` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Raster {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Per-channel mean pixel value.
    pub fn mean_pixel(&self) -> Vec<f32> {
        let mut sum = vec![0.0f64; self.channels];
        for px in self.data.chunks(self.channels) {
            for (s, v) in sum.iter_mut().zip(px) {
                *s += *v as f64;
            }
        }
        let n = (self.width * self.height).max(1) as f64;
        sum.into_iter().map(|s| (s / n) as f32).collect()
    }

    pub fn flip_horizontal(&self) -> Raster {
        let mut out = Raster::new(self.width, self.height, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(self.width - 1 - x, y, c, self.at(x, y, c));
                }
            }
        }
        out
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// `i + 0.5`), clamped at the borders.
    fn sample(&self, fx: f64, fy: f64, c: usize) -> f32 {
        let x = (fx - 0.5).clamp(0.0, (self.width - 1) as f64);
        let y = (fy - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (ax, ay) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
        let top = self.at(x0, y0, c) * (1.0 - ax) + self.at(x1, y0, c) * ax;
        let bot = self.at(x0, y1, c) * (1.0 - ax) + self.at(x1, y1, c) * ax;
        top * (1.0 - ay) + bot * ay
    }

    /// Resamples into the `target x target` network frame described by `t`,
    /// filling the padding with the image's mean pixel.
    pub fn letterbox(&self, t: &LetterboxTransform) -> Raster {
        let size = t.target_size as usize;
        let mean = self.mean_pixel();
        let (cw, ch) = t.content_size(self.width as u32, self.height as u32);
        let (x0, y0) = (t.pad_x as usize, t.pad_y as usize);
        let mut out = Raster::new(size, size, self.channels);
        for y in 0..size {
            for x in 0..size {
                let inside = x >= x0 && x < x0 + cw as usize && y >= y0 && y < y0 + ch as usize;
                for c in 0..self.channels {
                    let v = if inside {
                        let sx = (x as f64 + 0.5 - t.pad_x) / t.scale;
                        let sy = (y as f64 + 0.5 - t.pad_y) / t.scale;
                        self.sample(sx, sy, c)
                    } else {
                        mean[c]
                    };
                    out.set(x, y, c, v);
                }
            }
        }
        out
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::invalid("PNG output supports 3-channel rasters only"));
        }
        let file = std::fs::File::create(path)?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        w.write_image_data(&bytes)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        Ok(())
    }

    pub fn read_png(path: &Path) -> Result<Raster> {
        let file = open(path)?;
        let fmt = |e: png::DecodingError| Error::format(format!("{}: {e}", path.display()));
        let mut dec = png::Decoder::new(BufReader::new(file));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(fmt)?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(fmt)?;
        let (w, h) = (info.width as usize, info.height as usize);
        let src_ch = info.color_type.samples();
        let mut out = Raster::new(w, h, 3);
        for i in 0..w * h {
            let px = &buf[i * src_ch..(i + 1) * src_ch];
            for c in 0..3 {
                // grey(+alpha) replicates the luminance channel
                let v = if src_ch >= 3 { px[c] } else { px[0] };
                out.data[i * 3 + c] = v as f32 / 255.0;
            }
        }
        Ok(out)
    }
}

/// One line of an annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub image_w: u32,
    pub image_h: u32,
    pub query: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

impl AnnotationRecord {
    pub fn gt_box(&self) -> BBox {
        BBox::new(self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3])
    }

    /// Identity of the underlying image: the image path when present,
    /// otherwise the record id.
    pub fn image_key(&self) -> &str {
        self.image.as_deref().unwrap_or(&self.id)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() || self.id.chars().any(char::is_whitespace) {
            return Err(format!("id `{}` must be non-empty without whitespace", self.id));
        }
        if self.image_w == 0 || self.image_h == 0 {
            return Err("image_w and image_h must be positive".into());
        }
        let [x1, y1, x2, y2] = self.bbox;
        BBox::try_new(x1, y1, x2, y2).map_err(|e| e.to_string())?;
        if x2 - x1 <= 0.0 || y2 - y1 <= 0.0 {
            return Err("box has zero area".into());
        }
        Ok(())
    }
}

pub fn parse_annotations(text: &str, path: &str) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_string(),
            line: i + 1,
            msg,
        };
        let rec: AnnotationRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        rec.validate().map_err(err)?;
        if !seen.insert(rec.id.clone()) {
            return Err(err(format!("duplicate id `{}`", rec.id)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    parse_annotations(&read_to_string(path)?, &path.display().to_string())
}

pub fn format_annotations(records: &[AnnotationRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(format_annotations(records).as_bytes())?;
    Ok(())
}

/// Resolves a record's image path against the annotation file location.
pub fn image_path(annotation_path: &Path, rec: &AnnotationRecord) -> Option<PathBuf> {
    let rel = rec.image.as_ref()?;
    let base = annotation_path.parent().unwrap_or(Path::new("."));
    Some(base.join(rel))
}

/// Lower-cased whitespace tokens.
pub fn tokenize(query: &str) -> Vec<String> {
    query
        .split_whitespace()
        .map(|t| t.to_lowercase())
        .collect()
}

/// Token vocabulary; id 0 is reserved for unknown tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

pub const UNK: &str = "<unk>";

impl Vocabulary {
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut list: Vec<String> = tokens.into_iter().filter(|t| t != UNK).collect();
        list.sort();
        list.dedup();
        list.insert(0, UNK.to_string());
        Vocabulary { tokens: list }
    }

    pub fn from_queries<'a, I: IntoIterator<Item = &'a str>>(queries: I) -> Self {
        Self::from_tokens(queries.into_iter().flat_map(tokenize))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.tokens
            .binary_search_by(|t| t.as_str().cmp(token))
            .ok()
            .filter(|&i| i > 0 || token == UNK)
            .unwrap_or(0)
    }

    pub fn encode(&self, query: &str) -> Vec<usize> {
        tokenize(query).iter().map(|t| self.id(t)).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn to_text(&self) -> String {
        self.tokens.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.first().map(String::as_str) != Some(UNK) {
            return Err(Error::format("vocabulary file must start with <unk>"));
        }
        let mut sorted = tokens[1..].to_vec();
        sorted.sort();
        sorted.dedup();
        if sorted != tokens[1..] {
            return Err(Error::format("vocabulary tokens must be sorted and unique"));
        }
        Ok(Vocabulary { tokens })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::letterbox;

    fn record(id: &str) -> AnnotationRecord {
        AnnotationRecord {
            id: id.into(),
            image_w: 80,
            image_h: 60,
            query: "red square left".into(),
            bbox: [1.0, 2.0, 30.5, 40.0],
            image: None,
        }
    }

    #[test]
    fn annotation_round_trip_and_errors() {
        let recs = vec![record("a"), record("b")];
        let text = format_annotations(&recs);
        assert_eq!(parse_annotations(&text, "x").unwrap(), recs);
        let dup = format_annotations(&[record("a"), record("a")]);
        let err = parse_annotations(&dup, "x").unwrap_err().to_string();
        assert!(err.contains("x:2") && err.contains("duplicate"), "{err}");
        let bad = text.replace("30.5", "-3");
        assert!(parse_annotations(&bad, "x").is_err());
        assert!(parse_annotations("{not json}\n", "x").is_err());
    }

    #[test]
    fn letterbox_raster_pads_with_mean() {
        let mut r = Raster::new(4, 2, 3);
        for v in r.data.iter_mut().step_by(3) {
            *v = 1.0;
        }
        let t = letterbox(4, 2, 4).unwrap();
        let out = r.letterbox(&t);
        assert_eq!((out.width, out.height), (4, 4));
        // content rows 1..3, padding rows 0 and 3
        assert_eq!(out.at(0, 0, 0), 1.0);
        assert_eq!(out.at(2, 1, 0), 1.0);
        assert_eq!(out.at(2, 1, 1), 0.0);
        assert_eq!(out.at(0, 3, 1), 0.0);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = Raster::new(5, 3, 3);
        for (i, v) in r.data.iter_mut().enumerate() {
            *v = (i % 4) as f32 / 3.0;
        }
        let p = dir.path().join("a.png");
        r.write_png(&p).unwrap();
        let back = Raster::read_png(&p).unwrap();
        for (a, b) in r.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn vocabulary_reserves_unk() {
        let v = Vocabulary::from_queries(["red square", "blue Square left"]);
        assert_eq!(v.tokens()[0], UNK);
        assert_eq!(v.id("zebra"), 0);
        assert_ne!(v.id("square"), 0);
        assert_eq!(v.encode("RED square"), vec![v.id("red"), v.id("square")]);
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
    }
}
