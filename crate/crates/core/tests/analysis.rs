use objctx::analysis::{sensitivity_map, SensitivityMap};
use objctx::imaging::IntRect;
use objctx::network::{ContextNet, NetworkConfig, Pass, Variant};
use objctx::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> NetworkConfig {
    NetworkConfig {
        input_side: 20,
        channels: 2,
        conv_filters: [3, 3, 4, 4],
        head_width: 5,
        block_dropout: 0.25,
        head_dropout: 0.5,
        scale_name: "small".into(),
    }
}

/// Positive weights and biases on a positive input keep every ReLU active,
/// so the network is linear around the input up to max-pool switches. Near
/// ties between pooled values flip already at ε = 1e-2, hence the tiny probes.
/// Double precision keeps the finite differences clean.
fn positive_net(variant: Variant, seed: u64) -> ContextNet<f64> {
    let mut net: ContextNet<f64> = ContextNet::build(small(), variant, seed).unwrap();
    for p in net.params_mut() {
        p.value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = v.abs() + 0.01);
    }
    net
}

fn positive_input(seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([20, 20, 2], |_| rng.random_range(0.5f32..1.5))
}

/// ε times the norm of the Jacobian column of each input coordinate, summed
/// over channels per pixel.
fn jacobian_oracle(net: &ContextNet<f64>, x: &Tensor<f32>, epsilon: f64) -> Vec<f64> {
    let mut net = net.clone();
    let (logits, trace) = net.forward(&x.cast::<f64>(), Pass::Eval).unwrap();
    let grads: Vec<Vec<f64>> = (0..2)
        .map(|l| {
            let mut d = Tensor::zeros(logits.shape().to_vec());
            d.data_mut()[l] = 1.0;
            net.backward_to_input(&trace, &d, true)
                .unwrap()
                .unwrap()
                .into_data()
        })
        .collect();
    (0..400)
        .map(|p| {
            (0..2)
                .map(|c| {
                    let i = p * 2 + c;
                    epsilon * grads[0][i].hypot(grads[1][i])
                })
                .sum()
        })
        .collect()
}

fn relative_frobenius(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let norm: f64 = b.iter().map(|y| y * y).sum();
    (diff / norm).sqrt()
}

#[test]
fn locally_linear_network_matches_jacobian() {
    for (variant, seed) in [
        (Variant::Base, 1),
        (Variant::FullyConvolutional, 2),
        (Variant::Base, 3),
    ] {
        let net = positive_net(variant, seed);
        let x = positive_input(seed + 10);
        let eps = 1e-4;
        let map = sensitivity_map(&net, std::slice::from_ref(&x), eps, 1).unwrap();
        let oracle = jacobian_oracle(&net, &x, eps);
        let err = relative_frobenius(&map.values, &oracle);
        assert!(err < 1e-2, "{variant:?}: relative error {err:.2e}");
        // With no kinks nearby the sign of the probe does not matter.
        let flipped = sensitivity_map(&net, std::slice::from_ref(&x), -eps, 1).unwrap();
        assert!(relative_frobenius(&flipped.values, &map.values) < 0.1);
    }
}

#[test]
fn sensitivity_scales_with_epsilon_in_the_linear_regime() {
    let net = positive_net(Variant::Base, 4);
    let x = positive_input(5);
    let a = sensitivity_map(&net, std::slice::from_ref(&x), 1e-4, 1).unwrap();
    let b = sensitivity_map(&net, std::slice::from_ref(&x), 2e-4, 1).unwrap();
    let doubled: Vec<f64> = a.values.iter().map(|v| 2.0 * v).collect();
    assert!(relative_frobenius(&b.values, &doubled) < 1e-2);
}

#[test]
fn strided_probe_repeats_block_values() {
    let net = positive_net(Variant::Base, 6);
    let x = positive_input(7);
    let full = sensitivity_map(&net, std::slice::from_ref(&x), 1e-2, 1).unwrap();
    let coarse = sensitivity_map(&net, std::slice::from_ref(&x), 1e-2, 3).unwrap();
    for y in 0..20 {
        for x in 0..20 {
            assert_eq!(coarse.get(x, y), full.get(x - x % 3, y - y % 3));
        }
    }
}

#[test]
fn center_surround_ratio_by_hand() {
    let side = 8;
    let center = IntRect {
        x: 2,
        y: 2,
        w: 4,
        h: 4,
    };
    let values = (0..side * side)
        .map(|k| {
            if center.contains(k % side, k / side) {
                1.0
            } else {
                4.0
            }
        })
        .collect();
    let map = SensitivityMap {
        side,
        values,
        samples: 1,
        epsilon: 0.1,
        step: 1,
    };
    assert!((map.center_surround_ratio(&center) - 0.25).abs() < 1e-12);
}
