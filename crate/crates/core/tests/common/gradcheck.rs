//! Central finite-difference gradient checks for every differentiable layer.
//!
//! Everything runs in f64. Each check draws its inputs from a seed and
//! compares the analytic gradient against `(f(x+h) - f(x-h)) / 2h` with
//! `h = 1e-3`, coordinate by coordinate.

use objctx::network::{combined_loss, siamese_forward, ContextNet, NetworkConfig, Pass, Variant};
use objctx::tensor::{
    conv2d, conv2d_backward, conv2d_infer, dense, dense_backward, dropout_mask, l1_distance,
    maxpool2d, maxpool2d_backward, relu, relu_backward, softmax_cross_entropy, ClassLabel, Padding,
    Tensor,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const MAX_REL_ERR: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale.
const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Default, Clone, Copy)]
pub struct CheckStats {
    pub max_rel_err: f64,
    pub coords: usize,
    pub skipped: usize,
}

impl CheckStats {
    fn merge(&mut self, other: CheckStats) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.coords += other.coords;
        self.skipped += other.skipped;
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares `analytic` with central differences of `f` around `x`.
/// With `skip_kinks`, coordinates whose half-step estimate disagrees with
/// the full-step one (a kink inside the stencil) are skipped and counted.
pub fn compare(
    x: &[f64],
    analytic: &[f64],
    skip_kinks: bool,
    mut f: impl FnMut(&[f64]) -> f64,
) -> CheckStats {
    assert_eq!(x.len(), analytic.len());
    let mut stats = CheckStats::default();
    let mut buf = x.to_vec();
    let mut fd = |buf: &mut Vec<f64>, i: usize, h: f64| {
        let orig = buf[i];
        buf[i] = orig + h;
        let up = f(buf);
        buf[i] = orig - h;
        let down = f(buf);
        buf[i] = orig;
        (up - down) / (2.0 * h)
    };
    for (i, &a) in analytic.iter().enumerate() {
        let numeric = fd(&mut buf, i, STEP);
        if skip_kinks {
            let half = fd(&mut buf, i, STEP / 2.0);
            if rel_err(numeric, half) > MAX_REL_ERR / 10.0 {
                stats.skipped += 1;
                continue;
            }
        }
        stats.coords += 1;
        stats.max_rel_err = stats.max_rel_err.max(rel_err(a, numeric));
    }
    stats
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn weighted_sum(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn with_data(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

pub fn check_conv(seed: u64, padding: Padding) -> CheckStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = rng.random_range(3..=8);
    let w = rng.random_range(3..=8);
    let c = rng.random_range(1..=3);
    let f = rng.random_range(1..=3);
    let kh = rng.random_range(1..=3.min(h));
    let kw = rng.random_range(1..=3.min(w));
    let x = random_tensor(&mut rng, &[h, w, c]);
    let k = random_tensor(&mut rng, &[kh, kw, c, f]);
    let b = random_tensor(&mut rng, &[f]);
    let (y, cache) = conv2d(&x, &k, &b, padding).unwrap();
    let r = random_tensor(&mut rng, y.shape());
    let mut kg = vec![0.0; k.len()];
    let mut bg = vec![0.0; b.len()];
    let xg = conv2d_backward(&cache, &k, &r, &mut kg, &mut bg, true)
        .unwrap()
        .unwrap();

    let mut stats = compare(x.data(), xg.data(), false, |v| {
        weighted_sum(
            &conv2d_infer(&with_data(x.shape(), v), &k, &b, padding).unwrap(),
            &r,
        )
    });
    stats.merge(compare(k.data(), &kg, false, |v| {
        weighted_sum(
            &conv2d_infer(&x, &with_data(k.shape(), v), &b, padding).unwrap(),
            &r,
        )
    }));
    stats.merge(compare(b.data(), &bg, false, |v| {
        weighted_sum(
            &conv2d_infer(&x, &k, &with_data(b.shape(), v), padding).unwrap(),
            &r,
        )
    }));
    stats
}

pub fn check_maxpool(seed: u64) -> CheckStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [
        rng.random_range(2..=8),
        rng.random_range(2..=8),
        rng.random_range(1..=3),
    ];
    // distinct values spaced well beyond the stencil keep every argmax stable
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
    vals.shuffle(&mut rng);
    let x = with_data(&shape, &vals);
    let (y, cache) = maxpool2d(&x).unwrap();
    let r = random_tensor(&mut rng, y.shape());
    let xg = maxpool2d_backward(&cache, &r).unwrap();
    compare(x.data(), xg.data(), false, |v| {
        weighted_sum(&maxpool2d(&with_data(&shape, v)).unwrap().0, &r)
    })
}

pub fn check_relu(seed: u64) -> CheckStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [rng.random_range(1..=8), rng.random_range(1..=8), 2];
    let x = Tensor::from_fn(shape.to_vec(), |_| {
        let m: f64 = rng.random_range(0.01..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    });
    let r = random_tensor(&mut rng, &shape);
    let y = relu(&x);
    let xg = relu_backward(&y, &r).unwrap();
    compare(x.data(), xg.data(), false, |v| {
        weighted_sum(&relu(&with_data(&shape, v)), &r)
    })
}

pub fn check_dense(seed: u64) -> CheckStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=64);
    let m = rng.random_range(1..=8);
    let x = random_tensor(&mut rng, &[n]);
    let wt = random_tensor(&mut rng, &[n, m]);
    let b = random_tensor(&mut rng, &[m]);
    let r = random_tensor(&mut rng, &[m]);
    let mut wg = vec![0.0; wt.len()];
    let mut bg = vec![0.0; m];
    let xg = dense_backward(&x, &wt, &r, &mut wg, &mut bg, true)
        .unwrap()
        .unwrap();
    let mut stats = compare(x.data(), xg.data(), false, |v| {
        weighted_sum(&dense(&with_data(&[n], v), &wt, &b).unwrap(), &r)
    });
    stats.merge(compare(wt.data(), &wg, false, |v| {
        weighted_sum(&dense(&x, &with_data(&[n, m], v), &b).unwrap(), &r)
    }));
    stats.merge(compare(b.data(), &bg, false, |v| {
        weighted_sum(&dense(&x, &wt, &with_data(&[m], v)).unwrap(), &r)
    }));
    stats
}

pub fn check_dropout(seed: u64) -> CheckStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [rng.random_range(1..=8), rng.random_range(1..=8), 2];
    let n: usize = shape.iter().product();
    let rate = rng.random_range(0.0..0.9);
    let mask = dropout_mask::<f64, _>(n, rate, &mut rng).unwrap();
    let x = random_tensor(&mut rng, &shape);
    let r = random_tensor(&mut rng, &shape);
    let xg = mask.apply(&r).unwrap();
    compare(x.data(), xg.data(), false, |v| {
        weighted_sum(&mask.apply(&with_data(&shape, v)).unwrap(), &r)
    })
}

pub fn check_cross_entropy(seed: u64) -> CheckStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Tensor::new(
        [2],
        vec![rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)],
    )
    .unwrap();
    let label = if rng.random::<bool>() {
        ClassLabel::Positive
    } else {
        ClassLabel::Negative
    };
    let (_, g) = softmax_cross_entropy(&z, label).unwrap();
    compare(z.data(), g.data(), false, |v| {
        softmax_cross_entropy(&with_data(&[2], v), label).unwrap().0
    })
}

pub fn check_l1(seed: u64) -> CheckStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=16);
    let a = random_tensor(&mut rng, &[n]);
    // keep every coordinate at least 0.01 away from equality
    let b = Tensor::from_fn([n], |i| {
        let off: f64 = rng.random_range(0.01..1.0);
        a.data()[i] + if rng.random::<bool>() { off } else { -off }
    });
    let (_, g) = l1_distance(&a, &b).unwrap();
    compare(a.data(), g.data(), false, |v| {
        l1_distance(&with_data(&[n], v), &b).unwrap().0
    })
}

/// Smallest geometry the network accepts, in f64.
pub fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        input_side: 16,
        channels: 2,
        conv_filters: [2, 3, 3, 2],
        head_width: 4,
        block_dropout: 0.25,
        head_dropout: 0.5,
        scale_name: "tiny".into(),
    }
}

/// Whole-network check of the Siamese combined loss with respect to every
/// parameter and the raw input, including dropout and both streams.
pub fn check_siamese_network(seed: u64, variant: Variant) -> CheckStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = ContextNet::<f64>::build(tiny_config(), variant, seed).unwrap();
    // nonzero biases move units off the ReLU kink at zero input
    for p in net.params_mut() {
        if p.shape().len() == 1 {
            for v in p.value.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    let raw = random_tensor(&mut rng, &[16, 16, 2]);
    let mut masked = raw.clone();
    for y in 6..10 {
        for x in 5..11 {
            for c in 0..2 {
                masked.data_mut()[(y * 16 + x) * 2 + c] = 0.0;
            }
        }
    }
    let label = if rng.random::<bool>() {
        ClassLabel::Positive
    } else {
        ClassLabel::Negative
    };
    let masks = net.sample_dropout(raw.shape(), &mut rng).unwrap();
    let lambda = 0.5;

    let loss_of = |net: &ContextNet<f64>, raw: &Tensor<f64>| {
        let out = siamese_forward(net, &masked, raw, Pass::Train(&masks)).unwrap();
        combined_loss(&out.logits_masked, &out.logits_raw, label, lambda)
            .unwrap()
            .total
    };

    let out = siamese_forward(&net, &masked, &raw, Pass::Train(&masks)).unwrap();
    let loss = combined_loss(&out.logits_masked, &out.logits_raw, label, lambda).unwrap();
    net.zero_grad();
    net.backward(&out.trace_masked, &loss.grad_masked).unwrap();
    let raw_grad = net
        .backward_to_input(&out.trace_raw, &loss.grad_raw, true)
        .unwrap()
        .unwrap();

    let mut stats = compare(raw.data(), raw_grad.data(), true, |v| {
        loss_of(&net, &with_data(raw.shape(), v))
    });
    let n_params = net.params().count();
    for pi in 0..n_params {
        let p = net.params().nth(pi).unwrap();
        let (values, grads, shape) = (
            p.value.data().to_vec(),
            p.grad.data().to_vec(),
            p.shape().to_vec(),
        );
        let mut probe = net.clone();
        stats.merge(compare(&values, &grads, true, |v| {
            probe.params_mut().nth(pi).unwrap().value = with_data(&shape, v);
            loss_of(&probe, &raw)
        }));
    }
    stats
}

/// Every layer check with its seed count; returns (name, merged stats).
pub fn run_suite(seeds: u64) -> Vec<(&'static str, CheckStats)> {
    type Check = fn(u64) -> CheckStats;
    let checks: [(&str, Check); 10] = [
        ("conv2d/valid", |s| check_conv(s, Padding::Valid)),
        ("conv2d/same", |s| check_conv(s, Padding::Same)),
        ("maxpool2d", check_maxpool),
        ("relu", check_relu),
        ("dense", check_dense),
        ("dropout", check_dropout),
        ("softmax_cross_entropy", check_cross_entropy),
        ("l1_distance", check_l1),
        ("network/base", |s| check_siamese_network(s, Variant::Base)),
        ("network/fully-convolutional", |s| {
            check_siamese_network(s, Variant::FullyConvolutional)
        }),
    ];
    checks
        .iter()
        .map(|(name, check)| {
            let mut total = CheckStats::default();
            for seed in 0..seeds {
                total.merge(check(seed));
            }
            (*name, total)
        })
        .collect()
}
