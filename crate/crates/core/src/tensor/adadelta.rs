use serde::{Deserialize, Serialize};

use super::{Parameter, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdadeltaConfig {
    pub rho: f64,
    pub epsilon: f64,
    /// Multiplier on the computed update (the "learning rate" of Keras).
    pub scale: f64,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        Self {
            rho: 0.95,
            epsilon: 1e-6,
            scale: 1.0,
        }
    }
}

/// Adadelta update rule. State lives in each `Parameter`.
///
/// ```text
/// E[g²]  = rho·E[g²]  + (1-rho)·g²
/// Δ      = sqrt(E[Δ²] + eps) / sqrt(E[g²] + eps) · g
/// E[Δ²]  = rho·E[Δ²]  + (1-rho)·Δ²
/// x     -= scale·Δ
/// ```
#[derive(Clone, Copy, Debug)]
pub struct Adadelta {
    config: AdadeltaConfig,
}

impl Adadelta {
    pub fn new(config: AdadeltaConfig) -> Result<Self> {
        if !(config.rho > 0.0 && config.rho < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "adadelta rho {} outside (0, 1)",
                config.rho
            )));
        }
        if !(config.epsilon > 0.0) || !config.scale.is_finite() {
            return Err(Error::InvalidArgument(
                "adadelta epsilon must be positive".into(),
            ));
        }
        Ok(Self { config })
    }

    pub fn config(&self) -> AdadeltaConfig {
        self.config
    }

    /// Applies one update from the accumulated gradients (multiplied by
    /// `grad_scale`, e.g. 1/batch) and clears them.
    pub fn step<'a, T: Real, I>(&self, params: I, grad_scale: f64)
    where
        I: IntoIterator<Item = &'a mut Parameter<T>>,
    {
        let rho = T::of(self.config.rho);
        let one_minus = T::of(1.0 - self.config.rho);
        let eps = T::of(self.config.epsilon);
        let lr = T::of(self.config.scale);
        let gs = T::of(grad_scale);
        for p in params {
            let Parameter {
                value,
                grad,
                sq_grad_avg,
                sq_update_avg,
            } = p;
            let it = value
                .data_mut()
                .iter_mut()
                .zip(grad.data_mut().iter_mut())
                .zip(sq_grad_avg.data_mut().iter_mut())
                .zip(sq_update_avg.data_mut().iter_mut());
            for (((x, g), eg), ed) in it {
                let gv = *g * gs;
                *eg = rho * *eg + one_minus * gv * gv;
                let delta = ((*ed + eps).sqrt() / (*eg + eps).sqrt()) * gv;
                *ed = rho * *ed + one_minus * delta * delta;
                *x = *x - lr * delta;
                *g = T::zero();
            }
        }
    }
}
