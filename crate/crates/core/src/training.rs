//! Epoch loop for both network variants.
//!
//! The base variant learns from masked crops alone. The fully-convolutional
//! variant is trained as a Siamese pair: masked and raw crops pass through
//! the same weights with the same dropout masks, and the loss adds the L1
//! distance between the two logit vectors to the masked-stream cross entropy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::AnnotatedImage;
use crate::error::{Error, Result};
use crate::network::{combined_loss, siamese_forward, ContextNet, Pass, Variant};
use crate::sampling::{
    epoch_stream, materialize, mine_hard_negatives, normalize_images, shuffled, SamplePair,
    SampleSpec, SamplingConfig,
};
use crate::tensor::{
    l1_distance, softmax_cross_entropy, Adadelta, AdadeltaConfig, ClassLabel, Tensor,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub enabled: bool,
    /// Mined negatives added to each following epoch.
    pub top_k: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            top_k: 250,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    /// Weight of the distance term in the Siamese loss.
    pub lambda: f64,
    pub validation_fraction: f64,
    pub validation_samples: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub optimizer: AdadeltaConfig,
    pub sampling: SamplingConfig,
    pub mining: MiningConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            samples_per_epoch: 5000,
            batch_size: 16,
            lambda: 0.5,
            validation_fraction: 0.2,
            validation_samples: 1000,
            patience: 5,
            seed: 1,
            optimizer: AdadeltaConfig::default(),
            sampling: SamplingConfig::default(),
            mining: MiningConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.samples_per_epoch < 2 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs, samples per epoch and batch size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidArgument(format!(
                "validation fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda {} must be nonnegative",
                self.lambda
            )));
        }
        Adadelta::new(self.optimizer)?;
        Ok(())
    }

    /// Nominal square mask side in crop pixels.
    pub fn nominal_mask(&self, side: usize) -> usize {
        (self.sampling.object_fraction * side as f64).round() as usize
    }
}

/// Per-pair loss terms in evaluation mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairEval {
    pub loss: f64,
    pub distance: f64,
    pub correct: bool,
}

/// Mean loss, mean logit distance and masked-crop accuracy over a set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub loss: f64,
    pub distance: f64,
    pub accuracy: f64,
    pub count: usize,
}

/// Evaluation-mode loss of one pair under the objective of `net`'s variant.
pub fn evaluate_pair(net: &ContextNet, pair: &SamplePair, lambda: f64) -> Result<PairEval> {
    let lm = net.infer(&pair.masked)?;
    let lr = net.infer(&pair.raw)?;
    let lm = lm.reshape([2])?;
    let lr = lr.reshape([2])?;
    let (distance, _) = l1_distance(&lm, &lr)?;
    let (ce, _) = softmax_cross_entropy(&lm, pair.label)?;
    let loss = match net.variant() {
        Variant::Base => ce,
        Variant::FullyConvolutional => ce + lambda * distance,
    };
    let predicted = if lm.data()[0] >= lm.data()[1] {
        ClassLabel::Positive
    } else {
        ClassLabel::Negative
    };
    Ok(PairEval {
        loss,
        distance,
        correct: predicted == pair.label,
    })
}

pub fn evaluate(net: &ContextNet, pairs: &[SamplePair], lambda: f64) -> Result<EvalSummary> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let mut s = EvalSummary::default();
    for p in pairs {
        let e = evaluate_pair(net, p, lambda)?;
        s.loss += e.loss;
        s.distance += e.distance;
        s.accuracy += e.correct as u8 as f64;
    }
    let n = pairs.len() as f64;
    Ok(EvalSummary {
        loss: s.loss / n,
        distance: s.distance / n,
        accuracy: s.accuracy / n,
        count: pairs.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: EvalSummary,
    pub mined: usize,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: ContextNet,
    pub last: ContextNet,
    pub best_epoch: usize,
    pub history: Vec<EpochReport>,
    pub stopped_early: bool,
}

/// Splits image indices into (train, validation) with a seeded shuffle.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = shuffled(n, &mut rng);
    let n_val = if fraction > 0.0 && n >= 2 {
        ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let (val, train) = order.split_at(n_val);
    let (mut train, mut val) = (train.to_vec(), val.to_vec());
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Fixed evaluation pairs drawn from (already normalized) images.
pub fn fixed_pairs(
    images: &[AnnotatedImage],
    count: usize,
    side: usize,
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<Vec<SamplePair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (specs, _) = epoch_stream(images, count, side, cfg, &[], &mut rng)?;
    Ok(specs
        .iter()
        .map(|s| materialize(s, &images[s.image].pixels, side))
        .collect())
}

/// Accumulates the gradient of one pair and returns its training loss.
fn accumulate(
    net: &mut ContextNet,
    pair: &SamplePair,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let masks = net.sample_dropout(pair.masked.shape(), rng)?;
    match net.variant() {
        Variant::Base => {
            let (logits, trace) = net.forward(&pair.masked, Pass::Train(&masks))?;
            let (loss, grad) = softmax_cross_entropy(&logits, pair.label)?;
            let grad = grad.reshape(logits.shape().to_vec())?;
            net.backward(&trace, &grad)?;
            Ok(loss)
        }
        Variant::FullyConvolutional => {
            let out = siamese_forward(net, &pair.masked, &pair.raw, Pass::Train(&masks))?;
            let loss = combined_loss(&out.logits_masked, &out.logits_raw, pair.label, lambda)?;
            net.backward(&out.trace_masked, &loss.grad_masked)?;
            net.backward(&out.trace_raw, &loss.grad_raw)?;
            Ok(loss.total)
        }
    }
}

/// Trains `net` on `images` (raw pixels; normalized here). `on_epoch` sees
/// each epoch's report and the current weights, e.g. to write checkpoints.
pub fn train<F>(
    mut net: ContextNet,
    images: &[AnnotatedImage],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochReport, &ContextNet) -> Result<()>,
{
    cfg.validate()?;
    let side = net.config().input_side;
    let normalized = normalize_images(images);
    let (train_idx, val_idx) = split_indices(normalized.len(), cfg.validation_fraction, cfg.seed);
    let train_set: Vec<AnnotatedImage> = train_idx.iter().map(|&i| normalized[i].clone()).collect();
    let val_set: Vec<AnnotatedImage> = val_idx.iter().map(|&i| normalized[i].clone()).collect();
    // Without a validation split the training images double as the check set.
    let check_set = if val_set.iter().any(|i| !i.objects.is_empty()) {
        &val_set
    } else {
        &train_set
    };
    let val_pairs = fixed_pairs(
        check_set,
        cfg.validation_samples.max(2),
        side,
        &cfg.sampling,
        cfg.seed ^ 0x5eed,
    )?;

    let opt = Adadelta::new(cfg.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut extra: Vec<SampleSpec> = Vec::new();
    let mut best = net.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let (specs, report) = epoch_stream(
            &train_set,
            cfg.samples_per_epoch,
            side,
            &cfg.sampling,
            &extra,
            &mut rng,
        )?;
        if !report.skipped.is_empty() {
            log::debug!(
                "epoch {epoch}: {} positives skipped near borders",
                report.skipped.len()
            );
        }
        let order = shuffled(specs.len(), &mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            for &k in batch {
                let spec = &specs[k];
                let pair = materialize(spec, &train_set[spec.image].pixels, side);
                total += accumulate(&mut net, &pair, cfg.lambda, &mut rng)?;
            }
            opt.step(net.params_mut(), 1.0 / batch.len() as f64);
        }
        let validation = evaluate(&net, &val_pairs, cfg.lambda)?;
        if !validation.loss.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "validation loss diverged at epoch {epoch}"
            )));
        }
        let improved = validation.loss < best_loss;
        if improved {
            best_loss = validation.loss;
            best = net.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }

        extra.clear();
        if cfg.mining.enabled && net.variant() == Variant::FullyConvolutional && epoch < cfg.epochs
        {
            let m = cfg.nominal_mask(side);
            extra = mine_hard_negatives(&net, &train_set, cfg.mining.top_k, m, m, &cfg.sampling)?;
        }
        let report = EpochReport {
            epoch,
            train_loss: total / specs.len() as f64,
            validation,
            mined: extra.len(),
            improved,
        };
        log::info!(
            "epoch {epoch}: train {:.4} val {:.4} acc {:.3}",
            report.train_loss,
            validation.loss,
            validation.accuracy
        );
        on_epoch(&report, &net)?;
        history.push(report);
        if since_best >= cfg.patience {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        last: net,
        best_epoch,
        history,
        stopped_early,
    })
}

/// Logits of a single window as a flat 2-vector.
pub fn window_logits(net: &ContextNet, input: &Tensor<f32>) -> Result<Tensor<f32>> {
    net.infer(input)?.reshape([2])
}
