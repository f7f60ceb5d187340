//! Glue between the on-disk dataset layout and the core pipeline.
//!
//! A generated split directory holds the scene PNGs plus
//! `annotations.json`, `detections.json` and `truth.json`.

use std::collections::HashMap;
use std::path::Path;

use objctx::checkpoint;
use objctx::dataset::{
    read_detections, read_json, AnnotatedImage, BoxRecord, Dataset, DetectionSet,
};
use objctx::imaging::Image;
use objctx::inference::{dense_map, sliding_window_map, HeatMap};
use objctx::network::{ContextNet, Variant};
use objctx::retrieval::{
    random_score_map, rank_globally, retrieve_for_image, spatial_prior_map, CandidateRegion, Mode,
    RetrievalParams,
};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Split};
use crate::error::{CliError, CliResult};
use crate::runs::{ContextSource, TruthRecord};

/// Synthetic ground truth of one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneTruth {
    pub file: String,
    pub index: u64,
    pub sites: Vec<BoxRecord>,
    pub missing: Vec<BoxRecord>,
    pub off_site: Vec<BoxRecord>,
    pub decoys: Vec<BoxRecord>,
}

pub struct SplitData {
    pub dataset: Dataset,
    pub detections: DetectionSet,
    pub truth: Option<Vec<SceneTruth>>,
}

pub fn load_split(cfg: &RunConfig, split: Split) -> CliResult<SplitData> {
    let dir = cfg.split_dir(split);
    let dataset = Dataset::load(&dir.join("annotations.json"))?;
    let det_path = dir.join("detections.json");
    let detections = if det_path.is_file() {
        read_detections(&det_path)?
    } else {
        DetectionSet::default()
    };
    let truth_path = dir.join("truth.json");
    let truth = if truth_path.is_file() {
        Some(read_json(&truth_path, "scene truth")?)
    } else {
        None
    };
    Ok(SplitData {
        dataset,
        detections,
        truth,
    })
}

/// Grayscale images are replicated to the network's channel count.
pub fn to_channels(images: &[AnnotatedImage], channels: usize) -> CliResult<Vec<AnnotatedImage>> {
    images
        .iter()
        .map(|img| {
            Ok(AnnotatedImage {
                pixels: img.pixels.with_channels(channels)?,
                ..img.clone()
            })
        })
        .collect()
}

pub fn load_model(stem: &Path) -> CliResult<ContextNet> {
    let (net, _) = checkpoint::load(stem)?;
    Ok(net)
}

/// Scores every image of a split by how strongly its context predicts an
/// object at each location.
pub enum ContextScorer {
    Model(Box<ContextNet>),
    Prior {
        centers: Vec<(f64, f64)>,
        cache: HashMap<(usize, usize), HeatMap>,
    },
    Random {
        seed: u64,
    },
}

impl ContextScorer {
    pub fn new(source: &ContextSource, cfg: &RunConfig) -> CliResult<Self> {
        Ok(match source {
            ContextSource::Model { checkpoint } => {
                ContextScorer::Model(Box::new(load_model(Path::new(checkpoint))?))
            }
            ContextSource::Prior => {
                let train = Dataset::load(&cfg.split_dir(Split::Train).join("annotations.json"))?;
                let centers = train
                    .images
                    .iter()
                    .flat_map(|i| i.objects.iter().map(|o| o.center()))
                    .collect();
                ContextScorer::Prior {
                    centers,
                    cache: HashMap::new(),
                }
            }
            ContextSource::Random => ContextScorer::Random { seed: cfg.seed },
        })
    }

    /// Map of image number `position` in its split.
    pub fn score(&mut self, img: &Image, position: usize, cfg: &RunConfig) -> CliResult<HeatMap> {
        let (w, h) = (img.width(), img.height());
        match self {
            ContextScorer::Model(net) => model_map(net, img, cfg),
            ContextScorer::Prior { centers, cache } => {
                if let Some(m) = cache.get(&(w, h)) {
                    return Ok(m.clone());
                }
                let m = spatial_prior_map(centers, w, h)?;
                cache.insert((w, h), m.clone());
                Ok(m)
            }
            ContextScorer::Random { seed } => {
                Ok(random_score_map(w, h, seed.wrapping_add(position as u64)))
            }
        }
    }
}

/// Context map of one raw image: sliding window for the base network,
/// dense pyramid for the fully-convolutional one.
pub fn model_map(net: &ContextNet, img: &Image, cfg: &RunConfig) -> CliResult<HeatMap> {
    let input = img.with_channels(net.config().channels)?.normalize().0;
    let inf = &cfg.inference;
    Ok(match net.variant() {
        Variant::Base => sliding_window_map(net, &input, inf.stride, &inf.mask_widths)?,
        Variant::FullyConvolutional => dense_map(net, &input, &inf.scales)?,
    })
}

/// Ranked regions over a whole split.
pub fn retrieve_split(
    data: &SplitData,
    scorer: &mut ContextScorer,
    mode: Mode,
    cfg: &RunConfig,
) -> CliResult<Vec<CandidateRegion>> {
    let p = &cfg.pipeline;
    let params = RetrievalParams {
        threshold: p.threshold,
        d: p.d,
        max_count: p.max_count,
        order: mode.order(),
    };
    let mut per_image = Vec::with_capacity(data.dataset.images.len());
    for (k, img) in data.dataset.images.iter().enumerate() {
        let mut map = scorer.score(&img.pixels, k, cfg)?;
        map.source = img.id.clone();
        let dets = data.detections.for_file(&img.id).unwrap_or(&[]);
        per_image.push(retrieve_for_image(
            &map,
            dets,
            (img.width(), img.height()),
            mode,
            p.detection_threshold,
            &params,
        )?);
        log::debug!(
            "{}: {} candidates",
            img.id,
            per_image.last().map_or(0, Vec::len)
        );
    }
    Ok(rank_globally(per_image, mode.order(), p.max_count))
}

/// What the run should recall: missing sites in missing mode, planted
/// off-site objects in out-of-context mode. Without synthetic truth only
/// annotated missing boxes are known.
pub fn run_truth(data: &SplitData, mode: Mode) -> Option<Vec<TruthRecord>> {
    match (&data.truth, mode) {
        (Some(t), Mode::Missing) => Some(
            t.iter()
                .map(|s| TruthRecord {
                    image: s.file.clone(),
                    boxes: s.missing.clone(),
                })
                .collect(),
        ),
        (Some(t), Mode::OutOfContext) => Some(
            t.iter()
                .map(|s| TruthRecord {
                    image: s.file.clone(),
                    boxes: s.off_site.clone(),
                })
                .collect(),
        ),
        (None, Mode::Missing) => Some(
            data.dataset
                .images
                .iter()
                .map(|i| TruthRecord {
                    image: i.id.clone(),
                    boxes: i.missing.iter().map(BoxRecord::from_rect).collect(),
                })
                .collect(),
        ),
        (None, Mode::OutOfContext) => None,
    }
}

/// Thumbnail of a region at its native resolution.
pub fn crop(img: &Image, region: &CandidateRegion) -> CliResult<Image> {
    let b = region.bbox;
    let (w, h) = ((b.w.round() as usize).max(1), (b.h.round() as usize).max(1));
    if img.channels() != 1 && img.channels() != 3 {
        return Err(CliError::Runtime(format!(
            "cannot crop a {}-channel image",
            img.channels()
        )));
    }
    Ok(img.resample(b, w, h))
}
