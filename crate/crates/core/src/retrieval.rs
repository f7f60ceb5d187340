//! Missing-object and out-of-context retrieval: detector masks, score
//! combination, peak picking, baselines and Recall@K.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Detection;
use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::inference::{HeatMap, MapGeometry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// High context, no detection.
    Missing,
    /// Detection with low context.
    OutOfContext,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    Descending,
    Ascending,
}

impl Mode {
    pub fn order(self) -> Order {
        match self {
            Mode::Missing => Order::Descending,
            Mode::OutOfContext => Order::Ascending,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    #[default]
    Unlabeled,
    True,
    False,
}

/// Image-resolution 0/1 grid derived from detections.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryGrid {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<u8>,
}

impl BinaryGrid {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.cells[y * self.width + x]
    }

    /// Value at the pixel containing a source-image point (clamped).
    pub fn at_point(&self, x: f64, y: f64) -> u8 {
        let cx = (x.floor().max(0.0) as usize).min(self.width - 1);
        let cy = (y.floor().max(0.0) as usize).min(self.height - 1);
        self.get(cx, cy)
    }
}

/// Missing mode: 0 on pixels covered by a detection scoring at least
/// `threshold`, 1 elsewhere. Out-of-context mode is the complement.
pub fn detection_binary_map(
    dets: &[Detection],
    width: usize,
    height: usize,
    mode: Mode,
    threshold: f64,
) -> BinaryGrid {
    let mut covered = vec![false; width * height];
    for d in dets.iter().filter(|d| d.score >= threshold) {
        let b = d.bbox;
        let x0 = (b.x - 0.5).ceil().max(0.0) as usize;
        let y0 = (b.y - 0.5).ceil().max(0.0) as usize;
        for y in y0..height {
            if !(y as f64 + 0.5 < b.bottom()) {
                break;
            }
            for x in x0..width {
                if !(x as f64 + 0.5 < b.right()) {
                    break;
                }
                covered[y * width + x] = true;
            }
        }
    }
    let on = |c: bool| match mode {
        Mode::Missing => !c as u8,
        Mode::OutOfContext => c as u8,
    };
    BinaryGrid {
        width,
        height,
        cells: covered.into_iter().map(on).collect(),
    }
}

/// Context score times the binary value at each cell's center pixel.
pub fn combine(context: &HeatMap, binary: &BinaryGrid) -> HeatMap {
    let mut out = context.clone();
    for i in 0..context.rows {
        for j in 0..context.cols {
            let (x, y) = context.cell_center(i, j);
            out.scores[i * context.cols + j] *= binary.at_point(x, y) as f32;
        }
    }
    out
}

/// Cells whose center pixel is set in `binary`.
pub fn eligible_cells(map: &HeatMap, binary: &BinaryGrid) -> Vec<bool> {
    let mut out = Vec::with_capacity(map.rows * map.cols);
    for i in 0..map.rows {
        for j in 0..map.cols {
            let (x, y) = map.cell_center(i, j);
            out.push(binary.at_point(x, y) == 1);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRegion {
    pub rank: usize,
    pub image: String,
    #[serde(rename = "box")]
    pub bbox: Rect,
    pub score: f64,
    /// The `d × d` box was shifted to stay inside the image.
    pub clamped: bool,
    #[serde(default)]
    pub verdict: Verdict,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalParams {
    pub threshold: f64,
    pub d: f64,
    pub max_count: usize,
    pub order: Order,
}

/// Greedy peak picking. Descending order considers cells scoring at least
/// `threshold`; ascending order considers the `eligible` cells and ignores
/// the threshold. Each pick suppresses every cell within Chebyshev distance
/// `d / 2` of it (source pixels).
pub fn retrieve_regions(
    map: &HeatMap,
    eligible: Option<&[bool]>,
    image_size: (usize, usize),
    params: &RetrievalParams,
) -> Result<Vec<CandidateRegion>> {
    if !(params.d >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "region size {} below 1",
            params.d
        )));
    }
    if let Some(e) = eligible {
        if e.len() != map.scores.len() {
            return Err(Error::shape(
                "retrieve_regions",
                "eligibility mask does not match the map",
            ));
        }
    }
    let ok = |k: usize| eligible.is_none_or(|e| e[k]);
    let mut cand: Vec<usize> = (0..map.scores.len())
        .filter(|&k| match params.order {
            Order::Descending => ok(k) && map.scores[k] as f64 >= params.threshold,
            Order::Ascending => ok(k),
        })
        .collect();
    match params.order {
        Order::Descending => cand.sort_by(|&a, &b| map.scores[b].total_cmp(&map.scores[a])),
        Order::Ascending => cand.sort_by(|&a, &b| map.scores[a].total_cmp(&map.scores[b])),
    }
    let (w, h) = (image_size.0 as f64, image_size.1 as f64);
    let radius = params.d / 2.0;
    let mut taken: Vec<(f64, f64)> = Vec::new();
    let mut out = Vec::new();
    for k in cand {
        if out.len() >= params.max_count {
            break;
        }
        let (x, y) = map.cell_center(k / map.cols, k % map.cols);
        if taken
            .iter()
            .any(|&(px, py)| (px - x).abs().max((py - y).abs()) <= radius)
        {
            continue;
        }
        taken.push((x, y));
        let raw = Rect::centered(x, y, params.d, params.d);
        let bbox = raw.clamped_into(w, h);
        out.push(CandidateRegion {
            rank: out.len() + 1,
            image: map.source.clone(),
            bbox,
            score: map.scores[k] as f64,
            clamped: bbox != raw,
            verdict: Verdict::Unlabeled,
        });
    }
    Ok(out)
}

/// The per-image pipeline: detector mask, combination and peak picking.
/// Missing mode ranks `context × mask` in descending order; out-of-context
/// mode ranks the raw context of detector-covered cells in ascending order.
pub fn retrieve_for_image(
    context: &HeatMap,
    detections: &[Detection],
    image_size: (usize, usize),
    mode: Mode,
    detection_threshold: f64,
    params: &RetrievalParams,
) -> Result<Vec<CandidateRegion>> {
    let binary = detection_binary_map(
        detections,
        image_size.0,
        image_size.1,
        mode,
        detection_threshold,
    );
    let params = RetrievalParams {
        order: mode.order(),
        ..*params
    };
    match mode {
        Mode::Missing => retrieve_regions(&combine(context, &binary), None, image_size, &params),
        Mode::OutOfContext => {
            let eligible = eligible_cells(context, &binary);
            retrieve_regions(context, Some(&eligible), image_size, &params)
        }
    }
}

/// Merges per-image lists into one ranking (stable across images in input
/// order), keeps the first `max_count` and renumbers ranks from 1.
pub fn rank_globally(
    per_image: Vec<Vec<CandidateRegion>>,
    order: Order,
    max_count: usize,
) -> Vec<CandidateRegion> {
    let mut all: Vec<CandidateRegion> = per_image.into_iter().flatten().collect();
    match order {
        Order::Descending => all.sort_by(|a, b| b.score.total_cmp(&a.score)),
        Order::Ascending => all.sort_by(|a, b| a.score.total_cmp(&b.score)),
    }
    all.truncate(max_count);
    for (i, r) in all.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    all
}

/// Ground-truth boxes of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub image: String,
    pub boxes: Vec<Rect>,
}

/// For each ranked region, whether it matched a new ground-truth box. A
/// region matches the first not-yet-matched box (in the same image) whose
/// center it contains.
pub fn match_regions(regions: &[CandidateRegion], truth: &[GroundTruth]) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = truth.iter().map(|t| vec![false; t.boxes.len()]).collect();
    let mut order: Vec<usize> = (0..regions.len()).collect();
    order.sort_by_key(|&i| regions[i].rank);
    let mut hits = vec![false; regions.len()];
    for i in order {
        let r = &regions[i];
        let Some(ti) = truth.iter().position(|t| t.image == r.image) else {
            continue;
        };
        for (bi, b) in truth[ti].boxes.iter().enumerate() {
            let (cx, cy) = b.center();
            if !used[ti][bi] && r.bbox.contains_point(cx, cy) {
                used[ti][bi] = true;
                hits[i] = true;
                break;
            }
        }
    }
    hits
}

/// `(k, recall@k)` for each requested k, or `None` when there is no ground
/// truth to recall.
pub fn evaluate_recall_at_k(
    regions: &[CandidateRegion],
    truth: &[GroundTruth],
    ks: &[usize],
) -> Option<Vec<(usize, f64)>> {
    let total: usize = truth.iter().map(|t| t.boxes.len()).sum();
    if total == 0 {
        return None;
    }
    let hits = match_regions(regions, truth);
    let mut by_rank: Vec<(usize, bool)> = regions.iter().map(|r| r.rank).zip(hits).collect();
    by_rank.sort_by_key(|&(rank, _)| rank);
    let mut cumulative = Vec::with_capacity(by_rank.len());
    let mut n = 0;
    for (_, h) in &by_rank {
        n += *h as usize;
        cumulative.push(n);
    }
    Some(
        ks.iter()
            .map(|&k| {
                let top = k.min(cumulative.len());
                let m = if top == 0 { 0 } else { cumulative[top - 1] };
                (k, m as f64 / total as f64)
            })
            .collect(),
    )
}

/// Number of ground-truth boxes matched within the top `k` regions.
pub fn matched_count(regions: &[CandidateRegion], truth: &[GroundTruth], k: usize) -> usize {
    let top: Vec<CandidateRegion> = regions.iter().filter(|r| r.rank <= k).cloned().collect();
    match_regions(&top, truth)
        .into_iter()
        .filter(|&h| h)
        .count()
}

/// Side and standard deviation of the smoothing kernel of the spatial prior.
pub const PRIOR_KERNEL_SIDE: usize = 30;
pub const PRIOR_KERNEL_SIGMA: f64 = 10.0;

/// Normalized 1-D Gaussian taps; the even-sized kernel is centered between
/// taps `side/2 - 1` and `side/2`.
pub fn gaussian_taps(side: usize, sigma: f64) -> Vec<f64> {
    let c = (side as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..side)
        .map(|k| (-((k as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Object-center histogram of the training split smoothed with a truncated
/// 30×30 Gaussian (σ = 10) and rescaled to a maximum of 1. Returned as a
/// map with one cell per pixel.
pub fn spatial_prior_map(centers: &[(f64, f64)], width: usize, height: usize) -> Result<HeatMap> {
    if centers.is_empty() {
        return Err(Error::InvalidArgument(
            "spatial prior needs at least one training object".into(),
        ));
    }
    let mut counts = vec![0f64; width * height];
    for &(x, y) in centers {
        let cx = (x.floor().max(0.0) as usize).min(width - 1);
        let cy = (y.floor().max(0.0) as usize).min(height - 1);
        counts[cy * width + cx] += 1.0;
    }
    let taps = gaussian_taps(PRIOR_KERNEL_SIDE, PRIOR_KERNEL_SIGMA);
    let half = PRIOR_KERNEL_SIDE as isize / 2;
    // Separable correlation, zero outside the image.
    let pass = |src: &[f64], horizontal: bool| {
        let mut dst = vec![0f64; width * height];
        for y in 0..height {
            for x in 0..width {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let o = k as isize - half;
                    let (sx, sy) = if horizontal {
                        (x as isize + o, y as isize)
                    } else {
                        (x as isize, y as isize + o)
                    };
                    if sx >= 0 && sy >= 0 && (sx as usize) < width && (sy as usize) < height {
                        acc += t * src[sy as usize * width + sx as usize];
                    }
                }
                dst[y * width + x] = acc;
            }
        }
        dst
    };
    let smooth = pass(&pass(&counts, true), false);
    let max = smooth.iter().cloned().fold(0.0, f64::max);
    let scores = smooth.iter().map(|v| (v / max) as f32).collect();
    HeatMap::new(height, width, scores, pixel_geometry(), "prior")
}

/// Geometry of a map with one cell per source pixel.
pub fn pixel_geometry() -> MapGeometry {
    MapGeometry {
        stride: 1.0,
        patch_side: 1.0,
        scale: 1.0,
    }
}

/// I.i.d. U(0, 1) scores, one per pixel.
pub fn random_score_map(width: usize, height: usize, seed: u64) -> HeatMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = (0..width * height).map(|_| rng.random::<f32>()).collect();
    HeatMap::new(height, width, scores, pixel_geometry(), "random").expect("positive size")
}
