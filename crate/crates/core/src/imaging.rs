//! Float images in H×W×C layout and the resampling/normalization steps the
//! sampling and inference code share.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::tensor::Tensor;

/// Smallest standard deviation used when normalizing a channel.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

/// Per-channel statistics removed by `Image::normalize`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels whose standard deviation was clamped to `STD_FLOOR`.
    pub clamped: Vec<usize>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 || data.len() != width * height * channels {
            return Err(Error::shape(
                "image",
                format!("{width}×{height}×{channels} with {} samples", data.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
        )
        .expect("positive extents")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new([self.height, self.width, self.channels], self.data.clone())
            .expect("image extents")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (h, w, c) = t.hwc()?;
        Self::new(w, h, c, t.data().to_vec())
    }

    /// Zero-mean, unit-variance per channel (statistics accumulated in f64).
    pub fn normalize(&self) -> (Image, Normalization) {
        let c = self.channels;
        let n = (self.width * self.height) as f64;
        let mut mean = vec![0.0f64; c];
        for px in self.data.chunks_exact(c) {
            for (m, &v) in mean.iter_mut().zip(px) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; c];
        for px in self.data.chunks_exact(c) {
            for ((s, &v), m) in var.iter_mut().zip(px).zip(&mean) {
                let d = v as f64 - m;
                *s += d * d;
            }
        }
        let mut clamped = Vec::new();
        let std: Vec<f64> = var
            .iter()
            .enumerate()
            .map(|(ch, v)| {
                let s = (v / n).sqrt();
                if s < STD_FLOOR {
                    clamped.push(ch);
                    STD_FLOOR
                } else {
                    s
                }
            })
            .collect();
        let mut out = self.clone();
        for px in out.data.chunks_exact_mut(c) {
            for ch in 0..c {
                px[ch] = ((px[ch] as f64 - mean[ch]) / std[ch]) as f32;
            }
        }
        if !clamped.is_empty() {
            log::warn!(
                "constant channel(s) {clamped:?}: standard deviation clamped to {STD_FLOOR}"
            );
        }
        (out, Normalization { mean, std, clamped })
    }

    /// Bilinear resampling of `src` (in this image's pixel coordinates) onto
    /// an `out_w × out_h` grid. Samples outside the image clamp to the edge.
    pub fn resample(&self, src: Rect, out_w: usize, out_h: usize) -> Image {
        let sx = src.w / out_w as f64;
        let sy = src.h / out_h as f64;
        // Unit-scale, integer-aligned crops are plain copies.
        let exact = sx == 1.0
            && sy == 1.0
            && src.x.fract() == 0.0
            && src.y.fract() == 0.0
            && src.within(self.width as f64, self.height as f64);
        let c = self.channels;
        let mut out = Image::filled(out_w, out_h, c, 0.0);
        if exact {
            let (x0, y0) = (src.x as usize, src.y as usize);
            for j in 0..out_h {
                let s = ((y0 + j) * self.width + x0) * c;
                out.data[j * out_w * c..(j + 1) * out_w * c]
                    .copy_from_slice(&self.data[s..s + out_w * c]);
            }
            return out;
        }
        let maxx = (self.width - 1) as f64;
        let maxy = (self.height - 1) as f64;
        for j in 0..out_h {
            let fy = (src.y + (j as f64 + 0.5) * sy - 0.5).clamp(0.0, maxy);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for i in 0..out_w {
                let fx = (src.x + (i as f64 + 0.5) * sx - 0.5).clamp(0.0, maxx);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                for ch in 0..c {
                    let top =
                        self.get(x0, y0, ch) as f64 * (1.0 - tx) + self.get(x1, y0, ch) as f64 * tx;
                    let bot =
                        self.get(x0, y1, ch) as f64 * (1.0 - tx) + self.get(x1, y1, ch) as f64 * tx;
                    out.set(i, j, ch, (top * (1.0 - ty) + bot * ty) as f32);
                }
            }
        }
        out
    }

    /// Whole-image rescale; output extents are rounded.
    pub fn rescaled(&self, scale: f64) -> Image {
        let w = ((self.width as f64 * scale).round() as usize).max(1);
        let h = ((self.height as f64 * scale).round() as usize).max(1);
        self.resample(
            Rect::new(0.0, 0.0, self.width as f64, self.height as f64),
            w,
            h,
        )
    }

    /// Same pixels with `channels` channels. A one-channel image is
    /// replicated; otherwise the channel count must already match.
    pub fn with_channels(&self, channels: usize) -> Result<Image> {
        if channels == self.channels {
            return Ok(self.clone());
        }
        if self.channels != 1 || channels == 0 {
            return Err(Error::shape(
                "image",
                format!("cannot turn {} channels into {channels}", self.channels),
            ));
        }
        let data = self
            .data
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, channels))
            .collect();
        Image::new(self.width, self.height, channels, data)
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        let c = self.channels;
        for y in 0..self.height {
            for x in 0..self.width {
                let src = (y * self.width + (self.width - 1 - x)) * c;
                let dst = (y * self.width + x) * c;
                out.data[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
            }
        }
        out
    }

    /// Sets every channel inside `rect` (clipped to the image) to zero.
    pub fn zero_rect(&mut self, rect: &IntRect) {
        let x1 = (rect.x + rect.w).min(self.width);
        let y1 = (rect.y + rect.h).min(self.height);
        let c = self.channels;
        for y in rect.y.min(self.height)..y1 {
            let row =
                &mut self.data[(y * self.width + rect.x.min(x1)) * c..(y * self.width + x1) * c];
            row.fill(0.0);
        }
    }

    /// Reads an 8-bit PNG or PGM; grayscale files give one channel, anything
    /// else three. Samples are scaled to [0, 1].
    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (channels, bytes) = match img.color().channel_count() {
            1 | 2 => (1, img.to_luma8().into_raw()),
            _ => (3, img.to_rgb8().into_raw()),
        };
        Image::new(
            w,
            h,
            channels,
            bytes.into_iter().map(|b| b as f32 / 255.0).collect(),
        )
    }

    /// Quantizes [0, 1] samples to 8 bits.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => {
                return Err(Error::InvalidArgument(format!(
                    "cannot write {c}-channel PNG"
                )))
            }
        };
        image::save_buffer(
            path,
            &self.to_u8(),
            self.width as u32,
            self.height as u32,
            color,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Binary PGM of the first channel.
    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let gray: Vec<u8> = self
            .data
            .iter()
            .step_by(self.channels)
            .map(|&v| quantize(v))
            .collect();
        write_pgm(path, self.width, self.height, &gray)
    }
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(gray);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Integer pixel rectangle used for masks inside crops.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct IntRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl IntRect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    /// A `w × h` rectangle centered in a `side × side` square; odd slack
    /// rounds the offset down.
    pub fn centered_in(side: usize, w: usize, h: usize) -> IntRect {
        let w = w.min(side);
        let h = h.min(side);
        IntRect {
            x: (side - w) / 2,
            y: (side - h) / 2,
            w,
            h,
        }
    }

    pub fn to_rect(self) -> Rect {
        Rect::new(self.x as f64, self.y as f64, self.w as f64, self.h as f64)
    }
}
