use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Binary context label. Logit index 0 is the positive class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Positive,
    Negative,
}

impl ClassLabel {
    /// Parses the one-based class index used in the loss definition
    /// (1 = positive, 2 = negative).
    pub fn from_index(y: usize) -> Result<Self> {
        match y {
            1 => Ok(ClassLabel::Positive),
            2 => Ok(ClassLabel::Negative),
            _ => Err(Error::InvalidArgument(format!(
                "class label {y} outside {{1, 2}}"
            ))),
        }
    }

    pub fn logit_index(self) -> usize {
        match self {
            ClassLabel::Positive => 0,
            ClassLabel::Negative => 1,
        }
    }
}

/// Max-shifted softmax evaluated in f64.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<f64> {
    let max = logits
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Two-class cross entropy `-Q_y + log Σ exp Q`. Returns the loss and its
/// gradient with respect to the logits (softmax minus one-hot).
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    label: ClassLabel,
) -> Result<(f64, Tensor<T>)> {
    if logits.len() != 2 {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("expected 2 logits, got shape {:?}", logits.shape()),
        ));
    }
    if !logits.is_finite() {
        return Err(Error::InvalidArgument("non-finite logits".into()));
    }
    let y = label.logit_index();
    let z: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let loss = lse - z[y];
    let probs = softmax(logits.data());
    let grad = Tensor::from_fn(logits.shape().to_vec(), |i| {
        T::of(probs[i] - if i == y { 1.0 } else { 0.0 })
    });
    Ok((loss, grad))
}

/// `Σ|a_i - b_i|` and its gradient with respect to `a` (the gradient with
/// respect to `b` is the negation). The subgradient at equality is 0.
pub fn l1_distance<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "l1_distance",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut total = 0.0f64;
    let grad = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            total += d.abs();
            if d > 0.0 {
                T::one()
            } else if d < 0.0 {
                -T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    Ok((total, Tensor::new(a.shape().to_vec(), grad)?))
}
