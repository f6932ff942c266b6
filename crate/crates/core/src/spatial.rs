//! Fixed 8-channel coordinate map appended to the visual features.
//!
//! For grid position `(i, j)` on a `W x H` grid the channels are
//! `(i/W, j/H, (i+0.5)/W, (j+0.5)/H, (i+1)/W, (j+1)/H, 1/W, 1/H)`:
//! top-left corner, center, bottom-right corner, then the inverse grid size.

pub const SPATIAL_CHANNELS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMap {
    pub width: usize,
    pub height: usize,
    /// Row-major `[j][i][channel]`.
    values: Vec<f64>,
}

impl SpatialMap {
    pub fn new(width: usize, height: usize) -> Self {
        assert!(width >= 1 && height >= 1, "spatial map needs a non-empty grid");
        let (w, h) = (width as f64, height as f64);
        let mut values = Vec::with_capacity(width * height * SPATIAL_CHANNELS);
        for j in 0..height {
            for i in 0..width {
                let (x, y) = (i as f64, j as f64);
                values.extend_from_slice(&[
                    x / w,
                    y / h,
                    (x + 0.5) / w,
                    (y + 0.5) / h,
                    (x + 1.0) / w,
                    (y + 1.0) / h,
                    1.0 / w,
                    1.0 / h,
                ]);
            }
        }
        SpatialMap {
            width,
            height,
            values,
        }
    }

    pub fn at(&self, i: usize, j: usize) -> &[f64] {
        let base = (j * self.width + i) * SPATIAL_CHANNELS;
        &self.values[base..base + SPATIAL_CHANNELS]
    }

    /// Flat `[cells, 8]` buffer in row-major cell order (`j` outer, `i` inner).
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// One map per pyramid level, built once per layout.
pub fn spatial_maps(layout: &crate::anchors::AnchorLayout) -> Vec<SpatialMap> {
    layout
        .levels
        .iter()
        .map(|l| SpatialMap::new(l.grid, l.grid))
        .collect()
}
