//! Masked/raw training pairs drawn from annotated images.
//!
//! Images are normalized once per source image; crops are cut from the
//! normalized pixels and the mask is applied afterwards, so masked pixels
//! are exactly zero.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::AnnotatedImage;
use crate::error::{Error, Result};
use crate::geometry::{jaccard, Rect};
use crate::imaging::{Image, IntRect};
use crate::tensor::{ClassLabel, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Target object width as a fraction of the crop side.
    pub object_fraction: f64,
    pub max_negative_jaccard: f64,
    pub max_rejections: usize,
    pub flip_probability: f64,
    /// Negatives also keep clear of annotated empty sites.
    pub avoid_missing: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            object_fraction: 55.0 / 224.0,
            max_negative_jaccard: 0.2,
            max_rejections: 100,
            flip_probability: 0.5,
            avoid_missing: true,
        }
    }
}

/// Where a pair came from; enough to rebuild it from the source image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub image: usize,
    /// Crop window in source pixels; its side is `input_side / scale`.
    pub crop: Rect,
    pub scale: f64,
    /// Mask in crop pixels, before any flip.
    pub mask: IntRect,
    pub label: ClassLabel,
    pub flipped: bool,
}

impl SampleSpec {
    /// Mask as it appears in the emitted (possibly flipped) crop.
    pub fn emitted_mask(&self, side: usize) -> IntRect {
        if self.flipped {
            IntRect {
                x: side - self.mask.x - self.mask.w,
                ..self.mask
            }
        } else {
            self.mask
        }
    }

    /// Mask rectangle mapped back into source-image pixels.
    pub fn source_mask(&self) -> Rect {
        Rect::new(
            self.crop.x + self.mask.x as f64 / self.scale,
            self.crop.y + self.mask.y as f64 / self.scale,
            self.mask.w as f64 / self.scale,
            self.mask.h as f64 / self.scale,
        )
    }

    pub fn with_flip(self, flipped: bool) -> Self {
        Self { flipped, ..self }
    }
}

#[derive(Clone, Debug)]
pub struct SamplePair {
    pub raw: Tensor<f32>,
    pub masked: Tensor<f32>,
    pub label: ClassLabel,
    pub mask: IntRect,
    pub spec: SampleSpec,
}

/// Replaces each image's pixels with their per-channel normalized version.
pub fn normalize_images(images: &[AnnotatedImage]) -> Vec<AnnotatedImage> {
    images
        .iter()
        .map(|img| AnnotatedImage {
            pixels: img.pixels.normalize().0,
            ..img.clone()
        })
        .collect()
}

/// Cuts the crop described by `spec` from an already normalized image.
pub fn materialize(spec: &SampleSpec, image: &Image, side: usize) -> SamplePair {
    let mut raw = image.resample(spec.crop, side, side);
    if spec.flipped {
        raw = raw.flip_horizontal();
    }
    let mask = spec.emitted_mask(side);
    let mut masked = raw.clone();
    masked.zero_rect(&mask);
    SamplePair {
        raw: raw.to_tensor(),
        masked: masked.to_tensor(),
        label: spec.label,
        mask,
        spec: *spec,
    }
}

fn crop_side(side: usize, scale: f64) -> f64 {
    side as f64 / scale
}

/// Positive sample centered on `objects[object]`, rescaled so the object
/// spans `object_fraction` of the crop. Only that object is masked.
pub fn extract_positive(
    img: &AnnotatedImage,
    image_index: usize,
    object: usize,
    side: usize,
    cfg: &SamplingConfig,
) -> Result<SampleSpec> {
    let obj = img
        .objects
        .get(object)
        .ok_or_else(|| Error::InvalidArgument(format!("{}: no object {object}", img.id)))?;
    let scale = cfg.object_fraction * side as f64 / obj.w;
    let cs = crop_side(side, scale);
    let (cx, cy) = obj.center();
    let crop = Rect::new((cx - cs / 2.0).floor(), (cy - cs / 2.0).floor(), cs, cs);
    if !crop.within(img.width() as f64, img.height() as f64) {
        return Err(Error::Sampling(format!(
            "{}: object {object} too close to the border for a {cs:.1} px crop",
            img.id
        )));
    }
    // Outward rounding so the mask covers the whole object.
    let x0 = ((obj.x - crop.x) * scale).floor().max(0.0) as usize;
    let y0 = ((obj.y - crop.y) * scale).floor().max(0.0) as usize;
    let x1 = (((obj.right() - crop.x) * scale).ceil() as usize).min(side);
    let y1 = (((obj.bottom() - crop.y) * scale).ceil() as usize).min(side);
    Ok(SampleSpec {
        image: image_index,
        crop,
        scale,
        mask: IntRect {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        },
        label: ClassLabel::Positive,
        flipped: false,
    })
}

/// Boxes a negative mask must stay clear of.
fn forbidden<'a>(img: &'a AnnotatedImage, cfg: &SamplingConfig) -> impl Iterator<Item = &'a Rect> {
    let missing: &[Rect] = if cfg.avoid_missing { &img.missing } else { &[] };
    img.objects.iter().chain(missing)
}

/// True when a mask at `source_mask` is a valid negative location.
pub fn negative_allowed(img: &AnnotatedImage, source_mask: &Rect, cfg: &SamplingConfig) -> bool {
    forbidden(img, cfg).all(|b| jaccard(b, source_mask) <= cfg.max_negative_jaccard)
}

/// Negative sample whose centered mask inherits `mask_w × mask_h` (crop
/// pixels) and `scale` from the preceding positive.
#[allow(clippy::too_many_arguments)]
pub fn extract_negative<R: Rng>(
    img: &AnnotatedImage,
    image_index: usize,
    mask_w: usize,
    mask_h: usize,
    scale: f64,
    side: usize,
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<SampleSpec> {
    let cs = crop_side(side, scale);
    let max_x = (img.width() as f64 - cs).floor();
    let max_y = (img.height() as f64 - cs).floor();
    if max_x < 0.0 || max_y < 0.0 {
        return Err(Error::Sampling(format!(
            "{}: image smaller than a {cs:.1} px crop",
            img.id
        )));
    }
    let mask = IntRect::centered_in(side, mask_w, mask_h);
    for _ in 0..cfg.max_rejections {
        let x = rng.random_range(0..=max_x as usize) as f64;
        let y = rng.random_range(0..=max_y as usize) as f64;
        let spec = SampleSpec {
            image: image_index,
            crop: Rect::new(x, y, cs, cs),
            scale,
            mask,
            label: ClassLabel::Negative,
            flipped: false,
        };
        if negative_allowed(img, &spec.source_mask(), cfg) {
            return Ok(spec);
        }
    }
    Err(Error::Sampling(format!(
        "{}: no negative placement after {} attempts",
        img.id, cfg.max_rejections
    )))
}

/// Skipped positives during stream assembly, kept for reporting.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StreamReport {
    pub skipped: Vec<String>,
}

/// Interleaved positive/negative specs for one epoch (`length` rounded down
/// to even), each flipped with the configured probability, followed by
/// `extra_negatives`.
pub fn epoch_stream<R: Rng>(
    images: &[AnnotatedImage],
    length: usize,
    side: usize,
    cfg: &SamplingConfig,
    extra_negatives: &[SampleSpec],
    rng: &mut R,
) -> Result<(Vec<SampleSpec>, StreamReport)> {
    let objects: Vec<(usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, img)| (0..img.objects.len()).map(move |k| (i, k)))
        .collect();
    if objects.is_empty() {
        return Err(Error::InvalidArgument("dataset has no objects".into()));
    }
    let mut report = StreamReport::default();
    let mut out = Vec::with_capacity(length + extra_negatives.len());
    let attempts = 100 * images.len().max(1);
    for _ in 0..length / 2 {
        let mut pos = None;
        for _ in 0..attempts {
            let (i, k) = objects[rng.random_range(0..objects.len())];
            match extract_positive(&images[i], i, k, side, cfg) {
                Ok(spec) => {
                    pos = Some(spec);
                    break;
                }
                Err(e) => report.skipped.push(e.to_string()),
            }
        }
        let pos = pos.ok_or_else(|| Error::Sampling("no usable positive objects".into()))?;
        let mut neg = None;
        for _ in 0..attempts {
            let i = rng.random_range(0..images.len());
            if let Ok(spec) = extract_negative(
                &images[i], i, pos.mask.w, pos.mask.h, pos.scale, side, cfg, rng,
            ) {
                neg = Some(spec);
                break;
            }
        }
        let neg =
            neg.ok_or_else(|| Error::Sampling("no negative placement in any image".into()))?;
        for spec in [pos, neg] {
            let flip = rng.random_bool(cfg.flip_probability);
            out.push(spec.with_flip(flip));
        }
    }
    for spec in extra_negatives {
        let flip = rng.random_bool(cfg.flip_probability);
        out.push(spec.with_flip(flip));
    }
    Ok((out, report))
}

/// Deterministic shuffled order over `n` items.
pub fn shuffled<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// High-scoring locations of a fully-convolutional net that are valid
/// negatives, as specs for the next epoch. Candidates are the dense-map
/// cells at scale 1 whose centered `mask_w × mask_h` mask passes the
/// negative test; after sorting by score, candidates within half a mask
/// width (Chebyshev) of an already chosen one in the same image are dropped.
pub fn mine_hard_negatives<T: crate::tensor::Real>(
    sfc: &crate::network::ContextNet<T>,
    images: &[AnnotatedImage],
    top_k: usize,
    mask_w: usize,
    mask_h: usize,
    cfg: &SamplingConfig,
) -> Result<Vec<SampleSpec>> {
    if top_k == 0 {
        return Ok(Vec::new());
    }
    let side = sfc.config().input_side;
    let mask = IntRect::centered_in(side, mask_w, mask_h);
    let stride = crate::network::OUTPUT_STRIDE;
    let mut candidates = Vec::new();
    for (i, img) in images.iter().enumerate() {
        if img.width() < side || img.height() < side {
            continue;
        }
        let map = crate::inference::dense_single(sfc, &img.pixels, 1.0)?;
        for r in 0..map.rows {
            for c in 0..map.cols {
                let spec = SampleSpec {
                    image: i,
                    crop: Rect::new(
                        (c * stride) as f64,
                        (r * stride) as f64,
                        side as f64,
                        side as f64,
                    ),
                    scale: 1.0,
                    mask,
                    label: ClassLabel::Negative,
                    flipped: false,
                };
                if negative_allowed(img, &spec.source_mask(), cfg) {
                    candidates.push((map.get(r, c), spec));
                }
            }
        }
    }
    // Stable sort keeps scan order among ties.
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
    let radius = mask_w as f64 / 2.0;
    let mut chosen: Vec<SampleSpec> = Vec::with_capacity(top_k);
    for (_, spec) in candidates {
        let near = chosen.iter().any(|c| {
            c.image == spec.image
                && (c.crop.x - spec.crop.x)
                    .abs()
                    .max((c.crop.y - spec.crop.y).abs())
                    <= radius
        });
        if !near {
            chosen.push(spec);
            if chosen.len() == top_k {
                break;
            }
        }
    }
    Ok(chosen)
}
