use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::*;
use crate::tensor::{matmul, silu, softplus, softplus_inv, softsign};

fn small_cfg() -> ScaConfig {
    ScaConfig {
        model_dim: 12,
        mem_heads: 2,
        query_heads: 2,
        head_dim: 3,
        spectral_samples: 2,
        conv_kernel: 3,
        expand_factor: 2,
        swiglu_expansion: 3,
        seq_len_max: 64,
        precision: Default::default(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_vec(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-scale..scale)).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn zero_input_mixes_to_zero() {
    let cfg = small_cfg();
    let layer = ScaLayer::<f64>::randomized(&cfg, &mut rng(1), 0.3).unwrap();
    let mixed = project_and_mix(&cfg, &layer.params, &vec![0.0; 5 * cfg.model_dim], 5).unwrap();
    assert!(mixed.k.iter().chain(&mixed.s).chain(&mixed.q_re).chain(&mixed.q_im).all(|&v| v == 0.0));
}

#[test]
fn single_position_conv_uses_only_last_tap() {
    let cfg = small_cfg();
    let layer = ScaLayer::<f64>::randomized(&cfg, &mut rng(2), 0.3).unwrap();
    let x = random_vec(&mut rng(3), cfg.model_dim, 1.0);
    let mixed = project_and_mix(&cfg, &layer.params, &x, 1).unwrap();
    let taps = cfg.conv_kernel;
    for ch in 0..cfg.channels() {
        let expect = layer.params.conv.data[ch * taps + taps - 1] * mixed.u[ch];
        assert_eq!(mixed.v[ch], expect);
    }
}

#[test]
fn mixing_is_causal() {
    let cfg = small_cfg();
    let layer = ScaLayer::<f64>::randomized(&cfg, &mut rng(4), 0.3).unwrap();
    let len = 9;
    let d = cfg.model_dim;
    let mut r = rng(5);
    let x = random_vec(&mut r, len * d, 1.0);
    let a = project_and_mix(&cfg, &layer.params, &x, len).unwrap();
    let mut x2 = x.clone();
    for v in x2[5 * d..].iter_mut() {
        *v += r.random_range(-2.0..2.0);
    }
    let b = project_and_mix(&cfg, &layer.params, &x2, len).unwrap();
    let c = cfg.channels();
    assert_eq!(&a.v[..5 * c], &b.v[..5 * c]);
    assert_ne!(&a.v[5 * c..], &b.v[5 * c..]);
}

#[test]
fn contribution_weight_examples() {
    let cfg = small_cfg();
    let mut layer = ScaLayer::<f64>::init(&cfg, &mut rng(6)).unwrap();
    // γ·s + β = 0 and λ → 0
    layer.params.decay.data.iter_mut().for_each(|v| *v = -800.0);
    let s = vec![0.0; 4 * cfg.mem_heads];
    let a = contribution_weights(&cfg, &layer.params, &s, 4, 1.0);
    for &v in &a.alpha {
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    // λ = 0.5: the last position is undamped, earlier ones decay.
    layer.params.decay.data.iter_mut().for_each(|v| *v = softplus_inv(0.5));
    let s: Vec<f64> = random_vec(&mut rng(7), 6 * cfg.mem_heads, 1.0);
    let a = contribution_weights(&cfg, &layer.params, &s, 6, 1.0);
    let k = cfg.mem_heads;
    for hk in 0..k {
        let last = 5 * k + hk;
        assert!((a.alpha[last] - softplus(s[last])).abs() < 1e-15);
        let first = hk;
        let expect = softplus(s[first]) * (-0.5f64 * 5.0).exp();
        assert!((a.alpha[first] - expect).abs() < 1e-12);
    }
    assert!(a.alpha.iter().all(|&v| v > 0.0));
}

#[test]
fn encode_examples_and_modulus_identity() {
    let cfg = small_cfg();
    let mut layer = ScaLayer::<f64>::randomized(&cfg, &mut rng(8), 0.3).unwrap();
    let len = 4;
    let mut r = rng(9);
    let k = random_vec(&mut r, len * cfg.mem_heads * cfg.head_dim, 2.0);
    let alpha: Vec<f64> = (0..len * cfg.mem_heads).map(|_| r.random_range(0.1..2.0)).collect();

    let (re, im) = encode_complex(&cfg, &k, &alpha, &layer.grid, &layer.params, len);
    let (h, m) = (cfg.head_dim, cfg.spectral_samples);
    for t in 0..len {
        for hk in 0..cfg.mem_heads {
            for hd in 0..h {
                let amp = alpha[t * cfg.mem_heads + hk] * k[(t * cfg.mem_heads + hk) * h + hd];
                for mm in 0..m {
                    let n = ((t * cfg.mem_heads + hk) * h + hd) * m + mm;
                    assert!((re[n] * re[n] + im[n] * im[n] - amp * amp).abs() <= 1e-12 * (1.0 + amp * amp));
                }
            }
        }
    }

    layer.params.eta.data.iter_mut().for_each(|v| *v = 0.0);
    let (re, im) = encode_complex(&cfg, &k, &alpha, &layer.grid, &layer.params, len);
    assert!(im.iter().all(|&v| v == 0.0));
    for t in 0..len {
        for hk in 0..cfg.mem_heads {
            for hd in 0..h {
                let amp = alpha[t * cfg.mem_heads + hk] * k[(t * cfg.mem_heads + hk) * h + hd];
                assert_eq!(re[((t * cfg.mem_heads + hk) * h + hd) * m], amp);
            }
        }
    }

    let zeros = vec![0.0; k.len()];
    let (re, im) = encode_complex(&cfg, &zeros, &alpha, &layer.grid, &layer.params, len);
    assert!(re.iter().chain(&im).all(|&v| v == 0.0));
}

/// Independent O(L²) reference: for each t, sum τ ≤ t directly.
fn naive_scan(cfg: &ScaConfig, r: &[f64], i: &[f64], alpha: &[f64], len: usize) -> (Vec<f64>, Vec<f64>) {
    let nk = cfg.mem_heads;
    let hm = cfg.head_dim * cfg.spectral_samples;
    let mut rh = vec![0.0; r.len()];
    let mut ih = vec![0.0; i.len()];
    for t in 0..len {
        for hk in 0..nk {
            let z: f64 = (0..=t).map(|tau| alpha[tau * nk + hk]).sum();
            for n in 0..hm {
                let idx = |tau: usize| (tau * nk + hk) * hm + n;
                rh[idx(t)] = (0..=t).map(|tau| r[idx(tau)]).sum::<f64>() / z;
                ih[idx(t)] = (0..=t).map(|tau| i[idx(tau)]).sum::<f64>() / z;
            }
        }
    }
    (rh, ih)
}

#[test]
fn scan_matches_naive_double_loop() {
    let cfg = small_cfg();
    let len = 32;
    let khm = cfg.mem_heads * cfg.head_dim * cfg.spectral_samples;
    let mut r = rng(10);
    let re = random_vec(&mut r, len * khm, 1.0);
    let im = random_vec(&mut r, len * khm, 1.0);
    let alpha: Vec<f64> = (0..len * cfg.mem_heads).map(|_| r.random_range(0.05..1.5)).collect();
    let (rh, ih) = naive_scan(&cfg, &re, &im, &alpha, len);
    for backend in [ScanBackend::Cumsum, ScanBackend::MaskedMatmul] {
        let s = scan_accumulate(&cfg, &re, &im, &alpha, len, backend).unwrap();
        assert!(max_diff(&s.r_hat, &rh) <= 1e-12, "{backend:?}");
        assert!(max_diff(&s.i_hat, &ih) <= 1e-12, "{backend:?}");
    }
}

#[test]
fn scan_examples() {
    let cfg = small_cfg();
    let mut layer = ScaLayer::<f64>::randomized(&cfg, &mut rng(11), 0.3).unwrap();
    layer.params.eta.data.iter_mut().for_each(|v| *v = 1.3);
    let khm = cfg.mem_heads * cfg.head_dim * cfg.spectral_samples;
    let (h, m) = (cfg.head_dim, cfg.spectral_samples);
    // First position: α cancels and the state is k·e^{iφ}.
    let k = random_vec(&mut rng(12), cfg.mem_heads * h, 1.0);
    let alpha = vec![0.37, 2.9];
    let (re, im) = encode_complex(&cfg, &k, &alpha, &layer.grid, &layer.params, 1);
    let s = scan_accumulate(&cfg, &re, &im, &alpha, 1, ScanBackend::Cumsum).unwrap();
    for hk in 0..cfg.mem_heads {
        for hd in 0..h {
            let kv = k[hk * h + hd];
            for mm in 0..m {
                let idx = (hk * h + hd) * m + mm;
                let phi = softsign(1.3 * kv) * layer.grid.theta.data[idx];
                let expect = Complex64::from_polar(1.0, phi) * kv;
                assert!((s.r_hat[idx] - expect.re).abs() < 1e-15);
                assert!((s.i_hat[idx] - expect.im).abs() < 1e-15);
            }
        }
    }
    // Constant inputs give r/a at every position.
    let len = 7;
    let re = vec![0.6; len * khm];
    let im = vec![-0.2; len * khm];
    let alpha = vec![1.5; len * cfg.mem_heads];
    let s = scan_accumulate(&cfg, &re, &im, &alpha, len, ScanBackend::Cumsum).unwrap();
    assert!(s.r_hat.iter().all(|&v| (v - 0.4f64).abs() < 1e-15));
    assert!(s.i_hat.iter().all(|&v| (v + 0.2f64 / 1.5).abs() < 1e-15));
    // Non-positive mass is an invariant violation.
    let bad = vec![0.0; len * cfg.mem_heads];
    assert!(scan_accumulate(&cfg, &re, &im, &bad, len, ScanBackend::Cumsum).is_err());
}

/// Readout written with complex numbers: `Σ_m ω·state·conj(query)/√H`.
fn complex_readout(cfg: &ScaConfig, rh: &[f64], ih: &[f64], qr: &[f64], qi: &[f64], omega: &[f64], len: usize) -> (Vec<f64>, Vec<f64>) {
    let (h, m) = (cfg.head_dim, cfg.spectral_samples);
    let khm = cfg.mem_heads * h * m;
    let qhm = cfg.query_heads * h * m;
    let mut o_re = Vec::new();
    let mut o_im = Vec::new();
    for t in 0..len {
        for j in 0..cfg.query_heads {
            let mk = cfg.mem_head_for(j);
            for hd in 0..h {
                let mut acc = Complex64::new(0.0, 0.0);
                for mm in 0..m {
                    let si = t * khm + (mk * h + hd) * m + mm;
                    let qidx = (j * h + hd) * m + mm;
                    let state = Complex64::new(rh[si], ih[si]);
                    let query = Complex64::new(qr[t * qhm + qidx], qi[t * qhm + qidx]);
                    acc += omega[qidx] * state * query.conj();
                }
                acc /= (h as f64).sqrt();
                o_re.push(acc.re);
                o_im.push(acc.im);
            }
        }
    }
    (o_re, o_im)
}

#[test]
fn readout_matches_complex_oracle_including_gqa() {
    for (k, kq) in [(2, 2), (2, 4), (4, 2)] {
        let mut cfg = small_cfg();
        cfg.mem_heads = k;
        cfg.query_heads = kq;
        let len = 5;
        let (h, m) = (cfg.head_dim, cfg.spectral_samples);
        let mut r = rng(13 + k as u64 * 7 + kq as u64);
        let rh = random_vec(&mut r, len * k * h * m, 1.0);
        let ih = random_vec(&mut r, len * k * h * m, 1.0);
        let qr = random_vec(&mut r, len * kq * h * m, 1.0);
        let qi = random_vec(&mut r, len * kq * h * m, 1.0);
        let omega = random_vec(&mut r, kq * h * m, 1.0);
        let (a_re, a_im) = spectral_readout(&cfg, &rh, &ih, &qr, &qi, &omega, len);
        let (b_re, b_im) = complex_readout(&cfg, &rh, &ih, &qr, &qi, &omega, len);
        assert!(max_diff(&a_re, &b_re) < 1e-14);
        assert!(max_diff(&a_im, &b_im) < 1e-14);

        // Conjugating the query conjugates the output.
        let neg_qi: Vec<f64> = qi.iter().map(|v| -v).collect();
        let neg_ih: Vec<f64> = ih.iter().map(|v| -v).collect();
        let (c_re, c_im) = spectral_readout(&cfg, &rh, &neg_ih, &qr, &neg_qi, &omega, len);
        assert!(max_diff(&c_re, &a_re) < 1e-14);
        assert!(max_diff(&c_im, &a_im.iter().map(|v| -v).collect::<Vec<_>>()) < 1e-14);
    }
}

#[test]
fn readout_examples() {
    let mut cfg = small_cfg();
    cfg.mem_heads = 1;
    cfg.query_heads = 1;
    cfg.spectral_samples = 1;
    let h = cfg.head_dim;
    let sqrt_h = (h as f64).sqrt();
    let ones = vec![1.0; h];
    let zeros = vec![0.0; h];
    let omega = vec![sqrt_h; h];
    let (o_re, o_im) = spectral_readout(&cfg, &ones, &zeros, &ones, &zeros, &omega, 1);
    assert!(o_re.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    assert!(o_im.iter().all(|&v| v == 0.0));
}

#[test]
fn fuse_output_zero_cases() {
    let cfg = small_cfg();
    let mut layer = ScaLayer::<f64>::randomized(&cfg, &mut rng(14), 0.3).unwrap();
    let len = 3;
    let qh = cfg.query_heads * cfg.head_dim;
    let x = random_vec(&mut rng(15), len * cfg.model_dim, 1.0);
    let zero = vec![0.0; len * qh];
    let fused = fuse_output(&cfg, &layer.params, &zero, &zero, &x, len);
    assert!(fused.y.iter().all(|&v| v == 0.0));

    let o = random_vec(&mut rng(16), len * qh, 1.0);
    layer.params.w_gate.data.iter_mut().for_each(|v| *v = 0.0);
    let fused = fuse_output(&cfg, &layer.params, &o, &o, &x, len);
    assert!(fused.y.iter().all(|&v| v == 0.0));
}

#[test]
fn fuse_output_matches_manual_composition() {
    let cfg = small_cfg();
    let layer = ScaLayer::<f64>::randomized(&cfg, &mut rng(17), 0.3).unwrap();
    let p = &layer.params;
    let mut r = rng(18);
    let (d, h, nq) = (cfg.model_dim, cfg.head_dim, cfg.query_heads);
    let f = cfg.swiglu_hidden();
    let x = random_vec(&mut r, d, 1.0);
    let o_re = random_vec(&mut r, nq * h, 1.0);
    let o_im = random_vec(&mut r, nq * h, 1.0);
    let fused = fuse_output(&cfg, p, &o_re, &o_im, &x, 1);

    // gated RMS norm
    let u: Vec<f64> = o_re.iter().chain(&o_im).cloned().collect();
    let rms = (u.iter().map(|v| v * v).sum::<f64>() / u.len() as f64 + RMS_EPS).sqrt();
    let gate = matmul(&x, &p.w_gate.data, 1, d, u.len());
    let normed: Vec<f64> = (0..u.len()).map(|n| u[n] / rms * p.norm_scale.data[n] * silu(gate[n])).collect();
    // per-head SwiGLU on (re_j, im_j)
    let mut heads = Vec::new();
    for j in 0..nq {
        let mut inp = normed[j * h..(j + 1) * h].to_vec();
        inp.extend_from_slice(&normed[nq * h + j * h..nq * h + (j + 1) * h]);
        let w_read = &p.w_read.data[j * 2 * h * 2 * f..(j + 1) * 2 * h * 2 * f];
        let gu = matmul(&inp, w_read, 1, 2 * h, 2 * f);
        let hid: Vec<f64> = (0..f).map(|n| silu(gu[n]) * gu[f + n]).collect();
        heads.extend(matmul(&hid, &p.w_down.data[j * f * 2 * h..(j + 1) * f * 2 * h], 1, f, 2 * h));
    }
    let y = matmul(&heads, &p.w_out.data, 1, heads.len(), d);
    assert!(max_diff(&fused.y, &y) < 1e-13);
}

#[test]
fn one_streaming_step_equals_parallel_length_one() {
    let cfg = small_cfg();
    let layer = ScaLayer::<f64>::randomized(&cfg, &mut rng(19), 0.5).unwrap();
    let x = random_vec(&mut rng(20), cfg.model_dim, 1.0);
    let par = layer.forward_parallel(&x, 1).unwrap();
    let mut state = ScaState::new(&layer);
    let y = layer.step_streaming(&x, &mut state).unwrap();
    assert!(max_diff(&par, &y) < 1e-14);
    assert_eq!(state.t, 1);
}

#[test]
fn undecayed_state_is_the_raw_cumulative_sum() {
    let cfg = small_cfg();
    let mut layer = ScaLayer::<f64>::randomized(&cfg, &mut rng(21), 0.5).unwrap();
    layer.params.decay.data.iter_mut().for_each(|v| *v = -800.0);
    let len = 6;
    let x = random_vec(&mut rng(22), len * cfg.model_dim, 1.0);
    let trace = layer.forward_traced(&x, len, ForwardOptions { backend: ScanBackend::Cumsum, alpha_scale: 1.0 }).unwrap();
    let mut state = ScaState::new(&layer);
    let d = cfg.model_dim;
    for t in 0..len {
        layer.step_streaming(&x[t * d..(t + 1) * d], &mut state).unwrap();
    }
    let khm = state.r.len();
    let nk = cfg.mem_heads;
    let sum_r: Vec<f64> = (0..khm).map(|n| (0..len).map(|t| trace.r[t * khm + n]).sum()).collect();
    let sum_z: Vec<f64> = (0..nk).map(|n| (0..len).map(|t| trace.alpha.alpha[t * nk + n]).sum()).collect();
    assert!(max_diff(&state.r, &sum_r) < 1e-13);
    assert!(max_diff(&state.z, &sum_z) < 1e-13);
}

#[test]
fn state_size_is_fixed() {
    let cfg = small_cfg();
    let layer = ScaLayer::<f64>::randomized(&cfg, &mut rng(23), 0.5).unwrap();
    let mut state = ScaState::new(&layer);
    let before = state.size_bytes();
    let x = random_vec(&mut rng(24), cfg.model_dim, 1.0);
    for _ in 0..20 {
        layer.step_streaming(&x, &mut state).unwrap();
    }
    assert_eq!(state.size_bytes(), before);
    assert_eq!(before, cfg.state_scalars() * 8);
}

#[test]
fn zero_upstream_gradient_gives_zero_gradients() {
    let cfg = small_cfg();
    let layer = ScaLayer::<f64>::randomized(&cfg, &mut rng(25), 0.5).unwrap();
    let len = 5;
    let x = random_vec(&mut rng(26), len * cfg.model_dim, 1.0);
    let g = layer.backward(&x, len, &vec![0.0; len * cfg.model_dim]).unwrap();
    for (_, t) in g.params.tensors() {
        assert!(t.data.iter().all(|&v| v == 0.0));
    }
    assert!(g.x.iter().all(|&v| v == 0.0));
}

#[test]
fn input_gradient_is_causal() {
    let cfg = small_cfg();
    let layer = ScaLayer::<f64>::randomized(&cfg, &mut rng(27), 0.5).unwrap();
    let len = 8;
    let d = cfg.model_dim;
    let x = random_vec(&mut rng(28), len * d, 1.0);
    let mut dy = random_vec(&mut rng(29), len * d, 1.0);
    // upstream gradient only at positions < 4
    dy[4 * d..].iter_mut().for_each(|v| *v = 0.0);
    let g = layer.backward(&x, len, &dy).unwrap();
    assert!(g.x[4 * d..].iter().all(|&v| v == 0.0));
    assert!(g.x[..4 * d].iter().any(|&v| v != 0.0));
}

#[test]
fn shape_errors() {
    let cfg = small_cfg();
    let layer = ScaLayer::<f64>::init(&cfg, &mut rng(30)).unwrap();
    assert!(layer.forward_parallel(&[0.0; 5], 1).is_err());
    assert!(layer.forward_parallel(&[], 0).is_err());
    let mut state = ScaState::new(&layer);
    assert!(layer.step_streaming(&[0.0; 3], &mut state).is_err());
    layer.check_shapes().unwrap();
    let mut bad = layer.clone();
    bad.params.w_out.shape = vec![1, 1];
    assert!(bad.check_shapes().is_err());
}
