//! Model probes: per-pixel sensitivity and the mean masked/raw logit
//! distance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::IntRect;
use crate::inference::{HeatMap, MapGeometry};
use crate::network::ContextNet;
use crate::sampling::SamplePair;
use crate::tensor::{l1_distance, Real, Tensor};

/// Perturbation used when none is given, in normalized units.
pub const DEFAULT_EPSILON: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityMap {
    pub side: usize,
    /// Row-major, one value per input pixel; unprobed pixels (strided runs)
    /// hold the value of the probed pixel at the top-left of their block.
    pub values: Vec<f64>,
    pub samples: usize,
    pub epsilon: f64,
    pub step: usize,
}

impl SensitivityMap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.side + x]
    }

    /// Mean inside `center` divided by the mean outside it.
    pub fn center_surround_ratio(&self, center: &IntRect) -> f64 {
        let (mut cin, mut nin, mut cout, mut nout) = (0.0, 0usize, 0.0, 0usize);
        for y in 0..self.side {
            for x in 0..self.side {
                if center.contains(x, y) {
                    cin += self.get(x, y);
                    nin += 1;
                } else {
                    cout += self.get(x, y);
                    nout += 1;
                }
            }
        }
        (cin / nin.max(1) as f64) / (cout / nout.max(1) as f64)
    }

    /// Scaled to a maximum of 1 as a one-cell-per-pixel heat map.
    pub fn to_heat_map(&self) -> HeatMap {
        let max = self.values.iter().cloned().fold(0.0, f64::max);
        let scores = self
            .values
            .iter()
            .map(|&v| if max > 0.0 { (v / max) as f32 } else { 0.0 })
            .collect();
        let geometry = MapGeometry {
            stride: 1.0,
            patch_side: 1.0,
            scale: 1.0,
        };
        HeatMap::new(self.side, self.side, scores, geometry, "sensitivity").expect("square map")
    }
}

fn flat_logits<T: Real>(net: &ContextNet<T>, x: &Tensor<T>) -> Result<Vec<f64>> {
    Ok(net.infer(x)?.data().iter().map(|v| v.as_f64()).collect())
}

/// Sum over `samples` of `‖Q(x + ε·e_p) − Q(x)‖₂` for every pixel `p`,
/// perturbing each channel separately and summing the channels. `step > 1`
/// probes every `step`-th pixel in each direction. Small `epsilon` on an f32
/// network loses digits to cancellation; an f64 network avoids that.
pub fn sensitivity_map<T: Real>(
    net: &ContextNet<T>,
    samples: &[Tensor<f32>],
    epsilon: f64,
    step: usize,
) -> Result<SensitivityMap> {
    if step == 0 {
        return Err(Error::InvalidArgument("probe step must be positive".into()));
    }
    let side = net.config().input_side;
    let mut values = vec![0.0; side * side];
    for x in samples {
        let (h, w, c) = x.hwc()?;
        if h != side || w != side {
            return Err(Error::shape(
                "sensitivity_map",
                format!("{h}×{w} sample for a {side} px network"),
            ));
        }
        let mut probe = x.cast::<T>();
        let base = flat_logits(net, &probe)?;
        for py in (0..side).step_by(step) {
            for px in (0..side).step_by(step) {
                for ch in 0..c {
                    let i = (py * side + px) * c + ch;
                    let orig = probe.data()[i];
                    probe.data_mut()[i] = orig + T::of(epsilon);
                    let q = flat_logits(net, &probe)?;
                    probe.data_mut()[i] = orig;
                    let d2: f64 = q.iter().zip(&base).map(|(a, b)| (a - b) * (a - b)).sum();
                    values[py * side + px] += d2.sqrt();
                }
            }
        }
    }
    if step > 1 {
        for y in 0..side {
            for x in 0..side {
                values[y * side + x] = values[(y - y % step) * side + (x - x % step)];
            }
        }
    }
    Ok(SensitivityMap {
        side,
        values,
        samples: samples.len(),
        epsilon,
        step,
    })
}

/// Mean L1 distance between masked and raw logits over held-out pairs, in
/// evaluation mode.
pub fn mean_distance_loss(net: &ContextNet, pairs: &[SamplePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "mean distance over an empty set".into(),
        ));
    }
    let mut total = 0.0;
    for p in pairs {
        let (d, _) = l1_distance(&net.infer(&p.masked)?, &net.infer(&p.raw)?)?;
        total += d;
    }
    Ok(total / pairs.len() as f64)
}
