//! Context heat maps over whole images, by sliding window over the base
//! network or by dense evaluation of the fully-convolutional network.
//!
//! Both expect images that are already normalized.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{write_pgm, Image, IntRect};
use crate::network::{ContextNet, Variant, OUTPUT_STRIDE};
use crate::tensor::{softmax, Real};

pub const HMAP_MAGIC: &[u8; 4] = b"HMAP";
pub const HMAP_VERSION: u8 = 1;

/// Maps map cells to the source-image pixel at the center of their patch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapGeometry {
    /// Input pixels between neighbouring cells, at `scale`.
    pub stride: f64,
    pub patch_side: f64,
    pub scale: f64,
}

impl MapGeometry {
    /// Source-image `(x, y)` of the center of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let off = self.patch_side / (2.0 * self.scale);
        (
            self.stride * col as f64 / self.scale + off,
            self.stride * row as f64 / self.scale + off,
        )
    }

    /// Nearest cell to a source-image point, clamped into a `rows × cols` map.
    pub fn nearest_cell(&self, x: f64, y: f64, rows: usize, cols: usize) -> (usize, usize) {
        let off = self.patch_side / (2.0 * self.scale);
        let idx = |v: f64, n: usize| {
            (((v - off) * self.scale / self.stride).round().max(0.0) as usize).min(n - 1)
        };
        (idx(y, rows), idx(x, cols))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatMap {
    pub rows: usize,
    pub cols: usize,
    pub scores: Vec<f32>,
    pub geometry: MapGeometry,
    pub source: String,
}

impl HeatMap {
    pub fn new(
        rows: usize,
        cols: usize,
        scores: Vec<f32>,
        geometry: MapGeometry,
        source: impl Into<String>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || scores.len() != rows * cols {
            return Err(Error::shape(
                "heat map",
                format!("{rows}×{cols} with {} scores", scores.len()),
            ));
        }
        Ok(Self {
            rows,
            cols,
            scores,
            geometry,
            source: source.into(),
        })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.scores[row * self.cols + col]
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        self.geometry.cell_center(row, col)
    }

    pub fn with_scores(&self, scores: Vec<f32>) -> Result<HeatMap> {
        HeatMap::new(
            self.rows,
            self.cols,
            scores,
            self.geometry,
            self.source.clone(),
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(29 + 4 * self.scores.len());
        bytes.extend_from_slice(HMAP_MAGIC);
        bytes.push(HMAP_VERSION);
        bytes.extend_from_slice(&(self.rows as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for g in [
            self.geometry.stride,
            self.geometry.patch_side,
            self.geometry.scale,
        ] {
            bytes.extend_from_slice(&(g as f32).to_le_bytes());
        }
        for s in &self.scores {
            bytes.extend_from_slice(&s.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<HeatMap> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let source = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::decode(&bytes, source)
    }

    pub fn decode(bytes: &[u8], source: String) -> Result<HeatMap> {
        if bytes.len() < 25 || &bytes[..4] != HMAP_MAGIC {
            return Err(Error::format("heat map", "missing HMAP header"));
        }
        if bytes[4] != HMAP_VERSION {
            return Err(Error::Version {
                found: bytes[4] as u32,
                expected: HMAP_VERSION as u32,
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let (rows, cols) = (u32_at(5) as usize, u32_at(9) as usize);
        let geometry = MapGeometry {
            stride: f32_at(13) as f64,
            patch_side: f32_at(17) as f64,
            scale: f32_at(21) as f64,
        };
        let body = &bytes[25..];
        if body.len() != 4 * rows * cols {
            return Err(Error::format(
                "heat map",
                format!("{rows}×{cols} map with {} data bytes", body.len()),
            ));
        }
        let scores = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        HeatMap::new(rows, cols, scores, geometry, source)
    }

    /// 8-bit rendering, black = 0, white = 1.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let gray: Vec<u8> = self
            .scores
            .iter()
            .map(|&v| crate::imaging::quantize(v))
            .collect();
        write_pgm(path, self.cols, self.rows, &gray)
    }
}

/// Base-network map: at every `stride` step a canonical patch is cropped,
/// its centered square mask of each width zeroed, and the positive-class
/// probabilities fused by max.
pub fn sliding_window_map<T: Real>(
    base: &ContextNet<T>,
    img: &Image,
    stride: usize,
    mask_widths: &[usize],
) -> Result<HeatMap> {
    if base.variant() != Variant::Base {
        return Err(Error::InvalidArgument(
            "sliding window needs the base network".into(),
        ));
    }
    if stride == 0 || mask_widths.is_empty() {
        return Err(Error::InvalidArgument(
            "stride and mask widths must be positive".into(),
        ));
    }
    let p = base.config().input_side;
    if img.width() < p || img.height() < p {
        return Err(Error::InvalidArgument(format!(
            "image {}×{} smaller than the {p} px patch",
            img.width(),
            img.height()
        )));
    }
    let rows = (img.height() - p) / stride + 1;
    let cols = (img.width() - p) / stride + 1;
    let mut scores = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let patch = img.resample(
                crate::geometry::Rect::new(
                    (j * stride) as f64,
                    (i * stride) as f64,
                    p as f64,
                    p as f64,
                ),
                p,
                p,
            );
            let mut best = 0f64;
            for &w in mask_widths {
                let mut masked = patch.clone();
                masked.zero_rect(&IntRect::centered_in(p, w, w));
                let input = masked.to_tensor().cast::<T>();
                best = best.max(base.context_score(&input)?);
            }
            scores.push(best as f32);
        }
    }
    let geometry = MapGeometry {
        stride: stride as f64,
        patch_side: p as f64,
        scale: 1.0,
    };
    HeatMap::new(rows, cols, scores, geometry, "")
}

/// One dense fully-convolutional pass at the image's own scale.
pub fn dense_single<T: Real>(sfc: &ContextNet<T>, img: &Image, scale: f64) -> Result<HeatMap> {
    let logits = sfc.infer(&img.to_tensor().cast::<T>())?;
    let (rows, cols, k) = logits.hwc()?;
    debug_assert_eq!(k, 2);
    let scores = logits
        .data()
        .chunks_exact(2)
        .map(|l| softmax(l)[0] as f32)
        .collect();
    let geometry = MapGeometry {
        stride: OUTPUT_STRIDE as f64,
        patch_side: sfc.config().input_side as f64,
        scale,
    };
    HeatMap::new(rows, cols, scores, geometry, "")
}

/// Dense maps over an image pyramid, fused by per-cell max onto the grid of
/// the largest usable scale. Scales that shrink the image below the
/// canonical side are skipped with a warning.
pub fn dense_map<T: Real>(sfc: &ContextNet<T>, img: &Image, scales: &[f64]) -> Result<HeatMap> {
    if sfc.variant() != Variant::FullyConvolutional {
        return Err(Error::InvalidArgument(
            "dense maps need the fully-convolutional network".into(),
        ));
    }
    let p = sfc.config().input_side;
    let mut maps = Vec::new();
    for &s in scales {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad pyramid scale {s}")));
        }
        let scaled = if s == 1.0 {
            img.clone()
        } else {
            img.rescaled(s)
        };
        if scaled.width() < p || scaled.height() < p {
            log::warn!(
                "scale {s} gives a {}×{} image below the {p} px patch; skipped",
                scaled.width(),
                scaled.height()
            );
            continue;
        }
        maps.push(dense_single(sfc, &scaled, s)?);
    }
    fuse_max(maps)
}

/// Per-cell max fusion onto the grid of the map with the most cells, using
/// nearest-cell lookup in the others.
pub fn fuse_max(maps: Vec<HeatMap>) -> Result<HeatMap> {
    let finest = maps
        .iter()
        .enumerate()
        .max_by_key(|(_, m)| m.rows * m.cols)
        .map(|(i, _)| i)
        .ok_or_else(|| Error::InvalidArgument("no usable pyramid scale".into()))?;
    let mut out = maps[finest].clone();
    for (k, m) in maps.iter().enumerate() {
        if k == finest {
            continue;
        }
        for i in 0..out.rows {
            for j in 0..out.cols {
                let (x, y) = out.cell_center(i, j);
                let (r, c) = m.geometry.nearest_cell(x, y, m.rows, m.cols);
                let v = &mut out.scores[i * out.cols + j];
                *v = v.max(m.get(r, c));
            }
        }
    }
    Ok(out)
}
