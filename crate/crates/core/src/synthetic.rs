//! Procedural scenes: dark bands crossing on a textured background, with
//! objects sitting at the outer corners of each crossing. Sites left empty
//! are recorded as missing objects. An optional lighter lane crosses the
//! same vertical bands without ever hosting objects, which gives training
//! something hard to reject. A configurable oracle stands in for an object
//! detector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::dataset::{AnnotatedImage, Detection, DetectionRecord, DetectionSet};
use crate::error::{Error, Result};
use crate::geometry::{jaccard, Rect};
use crate::imaging::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub image_size: usize,
    /// Inclusive range for the number of vertical bands; each crossing
    /// contributes four sites.
    pub crossings: (usize, usize),
    pub placement_probability: f64,
    pub object_size: usize,
    pub object_jitter: usize,
    pub band_width: usize,
    pub band_jitter: usize,
    /// Gap between a band edge and the nearest object edge.
    pub site_gap: usize,
    /// Site centers keep at least this distance from the image border.
    pub margin: usize,
    pub texture_noise: f64,
    /// Objects planted away from any site or band.
    pub off_site_objects: usize,
    /// Adds the lighter horizontal lane. The main band and the lane then
    /// take one half of the image each.
    pub decoy_lane: bool,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            crossings: (1, 2),
            placement_probability: 0.5,
            object_size: 16,
            object_jitter: 2,
            band_width: 22,
            band_jitter: 4,
            site_gap: 2,
            margin: 32,
            texture_noise: 0.08,
            off_site_objects: 0,
            decoy_lane: true,
            seed: 7,
        }
    }
}

const BACKGROUND: f64 = 0.55;
const BAND: f64 = 0.25;
const LANE: f64 = 0.32;
const RIM: f64 = 0.95;

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.placement_probability;
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "placement probability {p} outside (0, 1]"
            )));
        }
        if self.crossings.0 == 0 || self.crossings.0 > self.crossings.1 {
            return Err(Error::InvalidArgument(format!(
                "bad crossing range {:?}",
                self.crossings
            )));
        }
        if self.object_size <= self.object_jitter || self.band_width <= self.band_jitter {
            return Err(Error::InvalidArgument(
                "jitter must be smaller than the nominal size".into(),
            ));
        }
        // Each crossing needs its band plus a site on either side, and
        // neighbouring crossings keep one object width apart.
        let span = self.band_width + self.band_jitter + 2 * (self.site_gap + self.object_size);
        let slot = self.image_size.saturating_sub(2 * self.margin) / self.crossings.1;
        if slot < span + self.object_size {
            return Err(Error::InvalidArgument(format!(
                "image size {} too small for {} crossings",
                self.image_size, self.crossings.1
            )));
        }
        if self.decoy_lane && self.image_size.saturating_sub(2 * self.margin) / 2 < span {
            return Err(Error::InvalidArgument(format!(
                "image size {} leaves no room for a decoy lane",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// One generated scene. Planted off-site objects appear in both
/// `image.objects` and `off_site`. `decoys` are the would-be sites at the
/// lane crossings.
#[derive(Clone, Debug)]
pub struct Scene {
    pub image: AnnotatedImage,
    pub sites: Vec<Rect>,
    pub off_site: Vec<Rect>,
    pub decoys: Vec<Rect>,
}

/// Per-item generator independent of the call order: stream `index` of the
/// ChaCha generator seeded with `seed`.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn quantized(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

fn jittered(rng: &mut ChaCha8Rng, nominal: usize, jitter: usize) -> usize {
    if jitter == 0 {
        nominal
    } else {
        rng.random_range(nominal - jitter..=nominal + jitter)
    }
}

/// Renders scene `index`. Sample values are multiples of 1/255 so a PNG
/// round trip is exact.
pub fn generate_scene(cfg: &WorldConfig, index: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = item_rng(cfg.seed, index);
    let n = cfg.image_size;
    let s = cfg.object_size;
    let g = cfg.site_gap;
    let half = s / 2;
    let reach = g + s;

    // Band positions are drawn so every site center keeps `margin` from the
    // border and sites of neighbouring crossings never touch. With a lane,
    // each horizontal stays inside its own half together with its sites.
    let hw = jittered(&mut rng, cfg.band_width, cfg.band_jitter);
    let (hy0, lane) = if cfg.decoy_lane {
        let lw = jittered(&mut rng, cfg.band_width, cfg.band_jitter);
        let mid = n / 2;
        let (top, bottom) = ((cfg.margin, mid), (mid, n - cfg.margin));
        let (main_half, lane_half) = if rng.random_bool(0.5) {
            (top, bottom)
        } else {
            (bottom, top)
        };
        let hy0 = rng.random_range(main_half.0 + reach..=main_half.1 - reach - hw);
        let ly0 = rng.random_range(lane_half.0 + reach..=lane_half.1 - reach - lw);
        (hy0, Some((ly0, lw)))
    } else {
        (
            rng.random_range(cfg.margin + g + half..=n - cfg.margin - g - half - hw),
            None,
        )
    };
    let crossings = rng.random_range(cfg.crossings.0..=cfg.crossings.1);
    let slot = (n - 2 * cfg.margin) / crossings;
    let mut verticals = Vec::with_capacity(crossings);
    for k in 0..crossings {
        let vw = jittered(&mut rng, cfg.band_width, cfg.band_jitter);
        let cmin = cfg.margin + k * slot;
        let cmax = if k + 1 == crossings {
            n - cfg.margin
        } else {
            cmin + slot - s
        };
        let x0 = rng.random_range(cmin + g + half..=cmax - vw - g - half);
        verticals.push((x0, vw));
    }
    let bands: Vec<Rect> = std::iter::once(Rect::new(0.0, hy0 as f64, n as f64, hw as f64))
        .chain(
            verticals
                .iter()
                .map(|&(x0, vw)| Rect::new(x0 as f64, 0.0, vw as f64, n as f64)),
        )
        .collect();

    let lane_rect = lane.map(|(ly0, lw)| Rect::new(0.0, ly0 as f64, n as f64, lw as f64));

    let mut px = vec![0f64; n * n];
    for v in px.iter_mut() {
        *v = BACKGROUND + rng.random_range(-cfg.texture_noise..=cfg.texture_noise);
    }
    for y in 0..n {
        for x in 0..n {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let level = if bands.iter().any(|b| b.contains_point(p.0, p.1)) {
                BAND
            } else if lane_rect.is_some_and(|l| l.contains_point(p.0, p.1)) {
                LANE
            } else {
                continue;
            };
            px[y * n + x] = level + rng.random_range(-cfg.texture_noise..=cfg.texture_noise);
        }
    }

    let corners = |y0: usize, h: usize| {
        let mut out = Vec::new();
        for &(x0, vw) in &verticals {
            for y in [y0 - g - s, y0 + h + g] {
                for x in [x0 - g - s, x0 + vw + g] {
                    out.push(Rect::new(x as f64, y as f64, s as f64, s as f64));
                }
            }
        }
        out
    };
    let sites = corners(hy0, hw);
    let decoys = lane.map(|(ly0, lw)| corners(ly0, lw)).unwrap_or_default();

    let mut objects = Vec::new();
    let mut missing = Vec::new();
    for site in &sites {
        if rng.random_bool(cfg.placement_probability) {
            let w = jittered(&mut rng, s, cfg.object_jitter) as f64;
            let h = jittered(&mut rng, s, cfg.object_jitter) as f64;
            let (cx, cy) = site.center();
            let obj = Rect::new((cx - w / 2.0).round(), (cy - h / 2.0).round(), w, h);
            paint_object(&mut px, n, &obj, cfg.texture_noise, &mut rng);
            objects.push(obj);
        } else {
            missing.push(*site);
        }
    }

    let mut off_site = Vec::new();
    let mut attempts = 0;
    while off_site.len() < cfg.off_site_objects && attempts < 1000 {
        attempts += 1;
        let x = rng.random_range(cfg.margin..=n - cfg.margin - s) as f64;
        let y = rng.random_range(cfg.margin..=n - cfg.margin - s) as f64;
        let r = Rect::new(x, y, s as f64, s as f64);
        let clear = |o: &Rect| {
            let (ax, ay) = r.center();
            let (bx, by) = o.center();
            (ax - bx).abs().max((ay - by).abs()) >= 2.0 * s as f64
        };
        let grown = Rect::new(
            r.x - reach as f64,
            r.y - reach as f64,
            r.w + 2.0 * reach as f64,
            r.h + 2.0 * reach as f64,
        );
        let touches_band = bands
            .iter()
            .chain(&lane_rect)
            .any(|b| b.intersection(&grown) > 0.0);
        if touches_band || !sites.iter().chain(&off_site).all(clear) {
            continue;
        }
        paint_object(&mut px, n, &r, cfg.texture_noise, &mut rng);
        off_site.push(r);
    }
    objects.extend(off_site.iter().copied());

    let pixels = Image::new(n, n, 1, px.into_iter().map(quantized).collect())?;
    let image = AnnotatedImage::new(scene_file_name(index), pixels, objects, missing)?;
    Ok(Scene {
        image,
        sites,
        off_site,
        decoys,
    })
}

pub fn scene_file_name(index: u64) -> String {
    format!("scene_{index:05}.png")
}

/// Noise texture inside a one-pixel bright rim.
fn paint_object(px: &mut [f64], n: usize, r: &Rect, noise: f64, rng: &mut ChaCha8Rng) {
    let (x0, y0) = (r.x as usize, r.y as usize);
    let (x1, y1) = (r.right() as usize, r.bottom() as usize);
    for y in y0..y1 {
        for x in x0..x1 {
            let rim = x == x0 || y == y0 || x + 1 == x1 || y + 1 == y1;
            px[y * n + x] = if rim {
                RIM + rng.random_range(-noise..=noise) / 2.0
            } else {
                rng.random_range(0.25..=0.85)
            };
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleDetectorConfig {
    pub false_negative_rate: f64,
    /// Expected spurious detections per image.
    pub false_positive_rate: f64,
    pub localization_jitter: f64,
    pub seed: u64,
}

impl Default for OracleDetectorConfig {
    fn default() -> Self {
        Self {
            false_negative_rate: 0.3,
            false_positive_rate: 0.5,
            localization_jitter: 2.0,
            seed: 11,
        }
    }
}

impl OracleDetectorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("false negative rate", self.false_negative_rate),
            ("false positive rate", self.false_positive_rate),
        ] {
            if !(0.0..1.0).contains(&v) && !(name == "false negative rate" && v == 1.0) {
                return Err(Error::InvalidArgument(format!("{name} {v} outside [0, 1)")));
            }
        }
        if !(self.localization_jitter >= 0.0) {
            return Err(Error::InvalidArgument(
                "negative localization jitter".into(),
            ));
        }
        Ok(())
    }
}

/// Simulated detections for scene `index`. `sites` are excluded from
/// spurious placements.
pub fn oracle_detect(
    img: &AnnotatedImage,
    sites: &[Rect],
    cfg: &OracleDetectorConfig,
    index: u64,
) -> Vec<Detection> {
    let mut rng = item_rng(cfg.seed, index);
    let (w, h) = (img.width() as f64, img.height() as f64);
    let mut out = Vec::new();
    for obj in &img.objects {
        // Draw everything up front so the stream does not depend on the outcome.
        let keep = rng.random::<f64>() >= cfg.false_negative_rate;
        let j = cfg.localization_jitter;
        let (dx, dy) = if j > 0.0 {
            (rng.random_range(-j..=j), rng.random_range(-j..=j))
        } else {
            (0.0, 0.0)
        };
        let score = rng.random_range(0.7..=1.0);
        if keep {
            let b = Rect::new(obj.x + dx, obj.y + dy, obj.w, obj.h).clamped_into(w, h);
            out.push(Detection { bbox: b, score });
        }
    }
    if cfg.false_positive_rate > 0.0 {
        let count = Poisson::new(cfg.false_positive_rate)
            .expect("positive rate")
            .sample(&mut rng) as usize;
        let size = sites.first().map_or(16.0, |s| s.w);
        for _ in 0..count {
            for _ in 0..100 {
                let b = Rect::new(
                    rng.random_range(0.0..=w - size),
                    rng.random_range(0.0..=h - size),
                    size,
                    size,
                );
                if sites
                    .iter()
                    .chain(&img.objects)
                    .all(|s| jaccard(s, &b) == 0.0)
                {
                    out.push(Detection {
                        bbox: b,
                        score: rng.random_range(0.3..0.7),
                    });
                    break;
                }
            }
        }
    }
    out
}

/// Runs the oracle over a list of scenes generated with indices `indices`.
pub fn detect_all(scenes: &[(u64, Scene)], cfg: &OracleDetectorConfig) -> DetectionSet {
    DetectionSet {
        detector: "oracle".into(),
        records: scenes
            .iter()
            .map(|(i, s)| DetectionRecord {
                file: s.image.id.clone(),
                detections: oracle_detect(&s.image, &s.sites, cfg, *i),
            })
            .collect(),
    }
}
