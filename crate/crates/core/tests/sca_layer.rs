use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqcond::sca::{contribution_weights, encode_complex, ScaConfig, ScaLayer, ScaState};
use seqcond::tensor::softsign;
use seqcond::verify::{layer_equivalence, layer_gradcheck, normalization_cancellation, random_config};
use seqcond::{Error, Precision};

fn random_input(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

#[test]
fn parallel_matches_streaming_in_double_precision() {
    let report = layer_equivalence(11, 60, 256, Precision::F64).unwrap();
    assert!(report.cases.iter().any(|c| c.len == 256));
    assert!(report.pass, "max deviation {:e}", report.max_abs_dev);
}

#[test]
fn parallel_matches_streaming_in_single_precision() {
    let report = layer_equivalence(12, 60, 256, Precision::F32).unwrap();
    assert!(report.pass, "max deviation {:e}", report.max_abs_dev);
}

#[test]
fn finite_differences_agree_with_backward_on_every_tensor() {
    for seed in 0..4u64 {
        let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
        let cfg = random_config(&mut r, 32, 16);
        let len = r.random_range(2..=16);
        let layer = ScaLayer::<f64>::randomized(&cfg, &mut r, 0.4).unwrap();
        let x = random_input(&mut r, len * cfg.model_dim);
        let report = layer_gradcheck(&layer, &x, len, seed, 1e-5, 1e-4).unwrap();
        assert_eq!(report.tensors.len(), 14);
        for t in &report.tensors {
            assert!(t.rel_error <= 1e-4, "seed {seed} {}: {:e}", t.name, t.rel_error);
        }
    }
}

#[test]
fn gradcheck_on_wider_gqa_layer() {
    let cfg = ScaConfig {
        model_dim: 32,
        mem_heads: 2,
        query_heads: 4,
        head_dim: 4,
        spectral_samples: 2,
        conv_kernel: 4,
        expand_factor: 2,
        swiglu_expansion: 2,
        seq_len_max: 16,
        precision: Precision::F64,
    };
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let layer = ScaLayer::<f64>::randomized(&cfg, &mut r, 0.2).unwrap();
    let x = random_input(&mut r, 16 * 32);
    let report = layer_gradcheck(&layer, &x, 16, 3, 1e-5, 1e-4).unwrap();
    assert!(report.pass, "{:#?}", report.tensors);
}

#[test]
fn rescaling_contribution_weights_leaves_output_unchanged() {
    let report = normalization_cancellation(5, 20).unwrap();
    assert!(report.pass, "max deviation {:e}", report.max_abs_dev);
}

#[test]
fn output_at_t_ignores_future_inputs_exactly() {
    let mut r = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10 {
        let cfg = random_config(&mut r, 24, 48);
        let len = r.random_range(2..=48);
        let layer = ScaLayer::<f64>::randomized(&cfg, &mut r, 0.3).unwrap();
        let d = cfg.model_dim;
        let x = random_input(&mut r, len * d);
        let cut = r.random_range(0..len);
        let mut x2 = x.clone();
        for v in x2[(cut + 1) * d..].iter_mut() {
            *v = r.random_range(-5.0..5.0);
        }
        let y = layer.forward_parallel(&x, len).unwrap();
        let y2 = layer.forward_parallel(&x2, len).unwrap();
        assert_eq!(&y[..(cut + 1) * d], &y2[..(cut + 1) * d]);
    }
}

#[test]
fn decode_state_does_not_grow() {
    let cfg = ScaConfig::desk(32);
    let layer = ScaLayer::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut state = ScaState::new(&layer);
    let before = state.size_bytes();
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..300 {
        layer.step_streaming(&random_input(&mut r, 32), &mut state).unwrap();
    }
    assert_eq!(state.t, 300);
    assert_eq!(state.size_bytes(), before);
    assert_eq!(before, cfg.state_scalars() * 8);
}

#[test]
fn input_errors() {
    let cfg = ScaConfig::desk(16);
    let layer = ScaLayer::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(matches!(layer.forward_parallel(&[], 0), Err(Error::Input(_))));
    assert!(matches!(layer.forward_parallel(&[0.0; 15], 1), Err(Error::Shape(_))));
    let mut state = ScaState::new(&layer);
    assert!(matches!(layer.step_streaming(&[0.0; 3], &mut state), Err(Error::Shape(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contribution_weights_are_positive(
        seed in any::<u64>(),
        len in 1usize..200,
        score_scale in 0.1f64..50.0,
        lambda_cap in 0.01f64..2.0,
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let cfg = random_config(&mut r, 16, 256);
        let layer = ScaLayer::<f64>::randomized(&cfg, &mut r, lambda_cap).unwrap();
        let s: Vec<f64> = (0..len * cfg.mem_heads).map(|_| r.random_range(-score_scale..score_scale)).collect();
        let a = contribution_weights(&cfg, &layer.params, &s, len, 1.0);
        // Positive unless the decay factor underflows for the oldest positions.
        let k = cfg.mem_heads;
        let lambdas = layer.params.lambdas();
        for t in 0..len {
            for hk in 0..k {
                let v = a.alpha[t * k + hk];
                prop_assert!(v >= 0.0 && v.is_finite());
                if a.pre[t * k + hk].min(0.0) - lambdas[hk] * ((len - 1 - t) as f64) > -700.0 {
                    prop_assert!(v > 0.0);
                }
            }
        }
    }

    #[test]
    fn encoded_phase_stays_inside_the_node(
        seed in any::<u64>(),
        key_scale in 0.01f64..1e6,
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let cfg = random_config(&mut r, 16, 8);
        let layer = ScaLayer::<f64>::randomized(&cfg, &mut r, 0.3).unwrap();
        let (k, h, m) = (cfg.mem_heads, cfg.head_dim, cfg.spectral_samples);
        let keys: Vec<f64> = (0..k * h).map(|_| r.random_range(-key_scale..key_scale)).collect();
        for hk in 0..k {
            let eta = layer.params.eta.data[hk];
            for hd in 0..h {
                let phase_scale = softsign(eta * keys[hk * h + hd]);
                prop_assert!(phase_scale.abs() < 1.0);
                for mm in 0..m {
                    let theta = layer.grid.theta.data[(hk * h + hd) * m + mm];
                    prop_assert!((phase_scale * theta).abs() < theta.abs());
                }
            }
        }
        // Unit weights: the encoded pair is (k cos φ, k sin φ), so its
        // modulus is |k| regardless of the phase.
        let alpha = vec![1.0; k];
        let (re, im) = encode_complex(&cfg, &keys, &alpha, &layer.grid, &layer.params, 1);
        for n in 0..re.len() {
            let kv = keys[n / m];
            prop_assert!(((re[n].hypot(im[n])) - kv.abs()).abs() <= 1e-9 * (1.0 + kv.abs()));
        }
    }
}
