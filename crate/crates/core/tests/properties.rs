use nlt_core::analysis::{classify_shift, kernel_mean_histogram, layer_shift_means, LayerShiftStats};
use nlt_core::{apply_nlt, init_shift_bank, CounterNet, LayerSpec, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn desk_net(width: usize, seed: u64) -> CounterNet {
    let encoder = vec![
        LayerSpec::conv3x3(1, width),
        LayerSpec::maxpool2(width),
        LayerSpec::conv3x3(width, width),
        LayerSpec::maxpool2(width),
        LayerSpec::maxpool2(width),
    ];
    let decoder = vec![
        LayerSpec::upsample2(width),
        LayerSpec::conv3x3(width, width),
        LayerSpec::upsample2(width),
        LayerSpec::upsample2(width),
        LayerSpec::conv1x1(width, 1),
    ];
    CounterNet::from_specs(1, encoder, decoder, seed).unwrap()
}

fn stats(means: &[(f64, f64)]) -> Vec<LayerShiftStats> {
    means
        .iter()
        .enumerate()
        .map(|(i, &(f, b))| LayerShiftStats {
            layer_index: i,
            mean_factor_minus_one: f,
            mean_bias: b,
            n_scalars: 4,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn nlt_is_affine_per_neuron(seed in 0u64..1000, f in -2.0f32..2.0, b in -0.5f32..0.5) {
        let net = desk_net(3, seed);
        let mut bank = init_shift_bank(&net);
        for l in &mut bank.layers {
            l.factor.fill(f);
            l.bias.fill(b);
        }
        let target = apply_nlt(&net.params, &bank).unwrap();
        for (s, t) in net.params.layers.iter().zip(&target.layers) {
            for (&w, &tw) in s.weight.data().iter().zip(t.weight.data()) {
                let want = f as f64 * w as f64 + b as f64;
                prop_assert!((tw as f64 - want).abs() <= 1e-6 * want.abs().max(1.0));
            }
            prop_assert_eq!(s.bias.data(), t.bias.data());
        }
    }

    #[test]
    fn nlt_without_bias_commutes_with_scaling(seed in 0u64..1000, alpha in 0.25f32..4.0) {
        let net = desk_net(2, seed);
        let mut bank = init_shift_bank(&net);
        for (i, l) in bank.layers.iter_mut().enumerate() {
            l.factor.iter_mut().enumerate().for_each(|(j, v)| *v = 0.5 + 0.1 * ((i + j) % 7) as f32);
        }
        let mut scaled = net.params.clone();
        for l in &mut scaled.layers {
            l.weight.data_mut().iter_mut().for_each(|w| *w *= alpha);
        }
        let a = apply_nlt(&scaled, &bank).unwrap();
        let b = apply_nlt(&net.params, &bank).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            for (&x, &y) in la.weight.data().iter().zip(lb.weight.data()) {
                let want = alpha as f64 * y as f64;
                prop_assert!((x as f64 - want).abs() <= 1e-5 * want.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn fresh_bank_is_identity(seed in 0u64..1000, width in 1usize..4) {
        let net = desk_net(width, seed);
        let target = apply_nlt(&net.params, &init_shift_bank(&net)).unwrap();
        prop_assert!(target.bitwise_eq(&net.params));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[2, 1, 16, 16], 1.0, &mut rng);
        let a = net.forward(&net.params, &x).unwrap();
        let b = net.forward(&target, &x).unwrap();
        let diff = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max);
        prop_assert!(diff <= 1e-6);
        prop_assert!(layer_shift_means(&init_shift_bank(&net))
            .iter()
            .all(|s| s.mean_factor_minus_one == 0.0 && s.mean_bias == 0.0));
    }

    #[test]
    fn classify_ignores_layer_order_and_positive_scale(
        means in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..12),
        scale in 0.01f64..100.0,
        rotate in 0usize..12,
        threshold in 0.5f64..1.0,
    ) {
        let base = classify_shift(&stats(&means), threshold).unwrap();
        let mut permuted = means.clone();
        let k = rotate % permuted.len();
        permuted.rotate_left(k);
        permuted.reverse();
        prop_assert_eq!(classify_shift(&stats(&permuted), threshold).unwrap(), base);
        let scaled: Vec<_> = means.iter().map(|&(f, b)| (f * scale, b * scale)).collect();
        prop_assert_eq!(classify_shift(&stats(&scaled), threshold).unwrap(), base);
    }

    #[test]
    fn histogram_counts_every_neuron(
        seed in 0u64..1000,
        width in 1usize..6,
        bins in 1usize..30,
        lo in -1.0f64..0.0,
        span in 0.001f64..2.0,
    ) {
        let net = desk_net(width, seed);
        for layer in &net.params.layers {
            let h = kernel_mean_histogram(layer, bins, (lo, lo + span)).unwrap();
            prop_assert_eq!(h.total(), layer.weight.shape()[0]);
            prop_assert_eq!(h.counts.len(), bins);
        }
    }
}
