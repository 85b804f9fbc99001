mod common;

use common::{head_bias_table, qkv, reference_head, rng, sparsemax_bisection, spec, ALL_MODES, STREAMABLE_MODES};
use lazy_attention::attention::{attend_naive, attend_two_pass, head_gradients, AttentionPath, HeadBias, HeadSpec};
use lazy_attention::normalizer::{elastic_row, softmax_row, sparsemax_row, NormalizerMode};
use lazy_attention::numeric::Tensor;
use lazy_attention::positional::{alibi_slope, apply_rope, BiasTable, RopeConfig};
use proptest::prelude::*;
use rand::Rng;

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    d / n.max(1e-12)
}

// ------------------------------------------------------------------ RoPE

#[test]
fn rope_matches_rotation_matrices() {
    let (dh, base) = (8, 10000.0);
    let cfg = RopeConfig::new(base, dh).unwrap();
    let mut r = rng(1);
    let x = common::randn(&[5, 2 * dh], 1.0, &mut r);
    let positions = [0, 1, 7, 100, 4095];
    let y = apply_rope(&x, &cfg, &positions).unwrap();
    for (row, &pos) in positions.iter().enumerate() {
        for head in 0..2 {
            for k in 0..dh / 2 {
                let theta = base.powf(-2.0 * k as f64 / dh as f64);
                let (c, s) = ((pos as f64 * theta).cos(), (pos as f64 * theta).sin());
                let at = head * dh + 2 * k;
                let (a, b) = (x.row(row)[at], x.row(row)[at + 1]);
                assert!((y.row(row)[at] - (c * a - s * b)).abs() < 1e-12);
                assert!((y.row(row)[at + 1] - (s * a + c * b)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn rope_frequencies() {
    let cfg = RopeConfig::new(10000.0, 64).unwrap();
    assert_eq!(cfg.freq(0).unwrap(), 1.0);
    assert!((cfg.freq(31).unwrap() - 10000f64.powf(-62.0 / 64.0)).abs() < 1e-15);
    assert!(cfg.freq(32).is_err());
    assert!(RopeConfig::new(10000.0, 7).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rope_inner_product_depends_on_offset_only(seed in 0u64..10_000, m in 0usize..300, n in 0usize..300, shift in 0usize..300) {
        let cfg = RopeConfig::new(10000.0, 8).unwrap();
        let mut r = rng(seed);
        let q = common::randn(&[1, 8], 1.0, &mut r);
        let k = common::randn(&[1, 8], 1.0, &mut r);
        let dot = |a: usize, b: usize| {
            let qa = apply_rope(&q, &cfg, &[a]).unwrap();
            let kb = apply_rope(&k, &cfg, &[b]).unwrap();
            qa.data().iter().zip(kb.data()).map(|(x, y)| x * y).sum::<f64>()
        };
        prop_assert!((dot(m, n) - dot(m + shift, n + shift)).abs() < 1e-9);
    }

    #[test]
    fn bias_is_zero_beyond_window(w in 1usize..20, dist in 0usize..60) {
        let mut t = BiasTable::<f64>::zeros(1, 1, w);
        for (i, x) in t.layer_mut(0).data_mut().iter_mut().enumerate() {
            *x = 1.0 + i as f64;
        }
        let b = t.lookup(0, 0, dist);
        if dist > w {
            prop_assert_eq!(b, 0.0);
        } else {
            prop_assert_eq!(b, 1.0 + dist as f64);
        }
    }

    #[test]
    fn elastic_rows_are_rectified_softmax(scores in prop::collection::vec(-6.0f64..6.0, 1..24), tau in -3.0f64..1.0) {
        let i = scores.len();
        let a = elastic_row(&scores, i, tau);
        let p = softmax_row(&scores);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&p) {
            prop_assert!(*x >= 0.0);
            prop_assert!((x - (y + tau / i as f64).max(0.0)).abs() < 1e-15);
            if tau <= 0.0 {
                prop_assert!(*x <= *y);
            }
        }
    }

    #[test]
    fn sparsemax_on_simplex(scores in prop::collection::vec(-4.0f64..4.0, 1..16)) {
        let a = sparsemax_row(&scores);
        prop_assert!(a.iter().all(|&x| x >= 0.0));
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn alibi_slopes() {
    assert_eq!(alibi_slope(0, 8), 1.0);
    assert_eq!(alibi_slope(1, 8), 0.5);
    assert_eq!(alibi_slope(7, 8), 2f64.powi(-7));
}

// --------------------------------------------------------------- normalizers

#[test]
fn worked_elastic_example() {
    let p = softmax_row(&[2.0f64, 0.0, 0.0]);
    assert!(max_abs(&p, &[0.7870, 0.1065, 0.1065]) < 1e-4);
    let a = elastic_row(&[2.0f64, 0.0, 0.0], 3, -1.0);
    assert!((a[0] - 0.4536).abs() < 1e-4);
    assert_eq!(&a[1..], &[0.0, 0.0]);
}

#[test]
fn sparsemax_matches_bisection_oracle() {
    let mut r = rng(2024);
    for _ in 0..1000 {
        let z: Vec<f64> = (0..8).map(|_| r.random_range(-3.0..3.0)).collect();
        let a = sparsemax_row(&z);
        assert!(max_abs(&a, &sparsemax_bisection(&z)) < 1e-9, "{z:?}");
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn uniform_scores_zero_the_elastic_row() {
    for i in 1..=64 {
        for s in [-5.0, 0.0, 0.37, 12.0] {
            assert!(elastic_row(&vec![s; i], i, -1.0f64).iter().all(|&a| a == 0.0));
            assert!(elastic_row(&vec![s as f32; i], i, -1.0f32).iter().all(|&a| a == 0.0));
        }
    }
}

// ------------------------------------------------------------------ heads

#[test]
fn naive_head_matches_scalar_loop() {
    let n = 17;
    let table: Vec<f64> = (0..6).map(|d| 0.3 - 0.1 * d as f64).collect();
    let bias = |d: usize| table.get(d).copied().unwrap_or(0.0);
    for (seed, &mode) in ALL_MODES.iter().enumerate() {
        let (q, k, v) = qkv::<f64>(n, 4, seed as u64);
        let tau = -0.6;
        let got = attend_naive(&q, &k, &v, &spec(mode, head_bias_table(&table), tau), true).unwrap();
        let (w, out) = reference_head(&q, &k, &v, mode, &bias, tau);
        let weights = got.weights.unwrap();
        for i in 0..n {
            assert!(max_abs(got.output.row(i), &out[i]) < 1e-12, "{mode} row {i}");
            let row: Vec<f64> = weights.row(i).iter().map(|&x| x as f64).collect();
            assert!(max_abs(&row, &w[i]) < 1e-6, "{mode} weights row {i}");
        }
    }
}

#[test]
fn two_pass_forward_matches_naive_at_32_bit() {
    let n = 256;
    let table: Vec<f32> = (0..65).map(|d| 0.5 * (-(d as f32) / 20.0).exp()).collect();
    for (s, &mode) in STREAMABLE_MODES.iter().enumerate() {
        let (q, k, v) = qkv::<f32>(n, 16, 10 + s as u64);
        let sp = HeadSpec { mode, bias: HeadBias::Table(&table), tau: -0.8f32 };
        let naive = attend_naive(&q, &k, &v, &sp, false).unwrap();
        for tile in [16, 64] {
            let tp = attend_two_pass(&q, &k, &v, &sp, tile, false).unwrap();
            let d = naive.output.max_abs_diff(&tp.output);
            assert!(d < 1e-5, "{mode} T={tile}: {d:e}");
        }
        let full = attend_two_pass(&q, &k, &v, &sp, n, false).unwrap();
        assert_eq!(full.output.data(), naive.output.data(), "{mode}: single tile must be bitwise naive");
    }
}

#[test]
fn two_pass_forward_matches_naive_at_64_bit() {
    for (s, &mode) in STREAMABLE_MODES.iter().enumerate() {
        let (q, k, v) = qkv::<f64>(256, 16, 20 + s as u64);
        let sp = HeadSpec { mode, bias: HeadBias::Alibi(0.125), tau: -0.8 };
        let naive = attend_naive(&q, &k, &v, &sp, false).unwrap();
        let tp = attend_two_pass(&q, &k, &v, &sp, 16, false).unwrap();
        assert!(naive.output.max_abs_diff(&tp.output) < 1e-10);
    }
}

#[test]
fn two_pass_backward_matches_naive() {
    let n = 256;
    let table: Vec<f64> = (0..33).map(|d| 0.4 - 0.02 * d as f64).collect();
    for (s, &mode) in STREAMABLE_MODES.iter().enumerate() {
        let (q, k, v) = qkv::<f64>(n, 8, 30 + s as u64);
        let dout = common::randn(&[n, 8], 1.0, &mut rng(99 + s as u64));
        let sp = HeadSpec { mode, bias: HeadBias::Table(&table), tau: -0.7 };
        let naive = head_gradients(&q, &k, &v, &sp, AttentionPath::Naive, &dout).unwrap();
        for tile in [16, 64] {
            let tp = head_gradients(&q, &k, &v, &sp, AttentionPath::TwoPass { tile }, &dout).unwrap();
            for (name, a, b) in [
                ("dq", naive.dq.data(), tp.dq.data()),
                ("dk", naive.dk.data(), tp.dk.data()),
                ("dv", naive.dv.data(), tp.dv.data()),
                ("dbias", &naive.dbias[..], &tp.dbias[..]),
            ] {
                let e = rel(a, b);
                assert!(e < 1e-4, "{mode} T={tile} {name}: {e:e}");
            }
            if mode.has_tau() {
                let e = (naive.dtau - tp.dtau).abs() / naive.dtau.abs().max(1e-12);
                assert!(e < 1e-4, "{mode} T={tile} dtau: {e:e}");
            }
        }
    }
}

#[test]
fn two_pass_auxiliary_memory_is_linear() {
    let mode = NormalizerMode::elastic();
    let mut fwd = Vec::new();
    let mut bwd = Vec::new();
    let mut naive = Vec::new();
    for n in [128, 256, 512] {
        let (q, k, v) = qkv::<f32>(n, 8, n as u64);
        let sp = HeadSpec { mode, bias: HeadBias::None, tau: -1.0f32 };
        fwd.push(attend_two_pass(&q, &k, &v, &sp, 64, false).unwrap().aux_peak as i64);
        naive.push(attend_naive(&q, &k, &v, &sp, false).unwrap().aux_peak as i64);
        let dout = Tensor::full(&[n, 8], 1.0f32);
        bwd.push(head_gradients(&q, &k, &v, &sp, AttentionPath::TwoPass { tile: 64 }, &dout).unwrap().aux_peak as i64);
    }
    for a in [&fwd, &bwd] {
        // n doubles each step, so a linear footprint doubles its increment
        assert_eq!(2 * (a[1] - a[0]), a[2] - a[1], "{a:?}");
        assert!(a[2] < 4 * 512, "{a:?}");
    }
    assert!(naive[2] > 3 * naive[1], "naive path should grow quadratically: {naive:?}");
}

#[test]
fn two_pass_rejects_sparsemax() {
    let (q, k, v) = qkv::<f64>(8, 4, 0);
    let sp = HeadSpec { mode: NormalizerMode::Sparsemax, bias: HeadBias::None, tau: 0.0 };
    assert!(attend_two_pass(&q, &k, &v, &sp, 4, false).is_err());
    let sp = HeadSpec { mode: NormalizerMode::Softmax, bias: HeadBias::None, tau: 0.0 };
    assert!(attend_two_pass(&q, &k, &v, &sp, 0, false).is_err());
}

#[test]
fn mismatched_head_shapes_are_rejected() {
    let (q, k, _) = qkv::<f64>(8, 4, 0);
    let v = Tensor::zeros(&[7, 4]);
    let sp = HeadSpec { mode: NormalizerMode::Softmax, bias: HeadBias::None, tau: 0.0 };
    assert!(attend_naive(&q, &k, &v, &sp, false).is_err());
}
