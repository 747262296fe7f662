mod common;

use proptest::prelude::*;
use s4mt::tensor::{causal_conv_direct, AttentionMask};
use s4mt::{Error, Tape, Tensor};

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut r = common::rng(1);
    let m = Tensor::randn(&[3, 3], 1.0, &mut r);
    let mut tape = Tape::new();
    let i3 = tape.constant(Tensor::eye(3));
    let mv = tape.constant(m.clone());
    let p = tape.matmul(i3, mv).unwrap();
    assert_eq!(tape.value(p), &m);

    let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let b = tape.constant(t(&[2, 1], &[1., 1.]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}", other = other.map(|_| ())),
    }
}

#[test]
fn matmul_gradient_is_ones_times_b_transpose() {
    let mut r = common::rng(2);
    let a0 = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b0 = Tensor::randn(&[4, 2], 1.0, &mut r);
    let mut tape = Tape::new();
    let a = tape.param(a0.clone());
    let b = tape.param(b0.clone());
    let c = tape.matmul(a, b).unwrap();
    let s = tape.sum(c);
    let g = tape.backward(s).unwrap();
    let ga = g.tensor(a).unwrap();
    let expect = Tensor::full(&[3, 2], 1.0).matmul(&b0.transpose2()).unwrap();
    assert!(ga.max_abs_diff(&expect) < 1e-6);
    // finite-difference oracle at eps = 1e-3
    let errs = common::grad_check(&[a0, b0], 1e-3, |tp, v| tp.matmul(v[0], v[1]).unwrap());
    assert!(errs.iter().all(|&e| e < 1e-3), "{errs:?}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[1, 4]));
    let s = tape.softmax(z, 1).unwrap();
    assert_eq!(tape.value(s).data(), &[0.25; 4]);

    let big = tape.constant(t(&[2], &[1000., 1000.]));
    let s = tape.softmax(big, 0).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

    let x = tape.constant(t(&[2], &[0.0, 3f32.ln()]));
    let s = tape.softmax(x, 0).unwrap();
    let d = tape.value(s).data();
    assert!((d[0] - 0.25).abs() < 1e-7 && (d[1] - 0.75).abs() < 1e-7);

    let nan = tape.constant(t(&[2], &[f32::NAN, 0.0]));
    assert!(matches!(tape.softmax(nan, 0), Err(Error::Numeric(_))));
    assert!(matches!(tape.softmax(x, 3), Err(Error::Argument(_))));
}

#[test]
fn softmax_over_leading_axis() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 3], &[0., 1., 2., 0., 1., 2.]));
    let s = tape.softmax(x, 0).unwrap();
    assert!(tape.value(s).data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::full(&[3], 1.0));
    let b = tape.constant(Tensor::zeros(&[3]));
    let c = tape.constant(Tensor::full(&[2, 3], 7.0));
    let y = tape.layer_norm(c, g, b, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let g2 = tape.constant(Tensor::full(&[2], 1.0));
    let b2 = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
    let y = tape.layer_norm(x, g2, b2, 1e-12).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] + 1.0).abs() < 1e-6 && (d[1] - 1.0).abs() < 1e-6);
}

#[test]
fn gelu_and_glu_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[0.0, 2.0]));
    let y = tape.gelu(x);
    let d = tape.value(y).data();
    assert_eq!(d[0], 0.0);
    // 0.5·2·(1 + tanh(√(2/π)·(2 + 0.044715·8)))
    assert!((d[1] - 1.9546).abs() < 1e-4, "{}", d[1]);

    let v = tape.constant(t(&[1, 2], &[3.0, 0.0]));
    let g = tape.glu(v).unwrap();
    assert_eq!(tape.value(g).data(), &[1.5]);
    let odd = tape.constant(Tensor::zeros(&[1, 3]));
    assert!(matches!(tape.glu(odd), Err(Error::Shape { .. })));
}

#[test]
fn fft_conv_identity_kernels() {
    let mut r = common::rng(3);
    let len = 40;
    let u0 = Tensor::randn(&[len, 3], 1.0, &mut r);
    let mut delta = Tensor::zeros(&[len, 3]);
    for h in 0..3 {
        delta.data_mut()[h] = 1.0;
    }
    let mut tape = Tape::new();
    let u = tape.constant(u0.clone());
    let d = tape.constant(delta.clone());
    let y = tape.fft_causal_conv(u, d).unwrap();
    assert!(tape.value(y).max_abs_diff(&u0) < 1e-5);
    let y2 = tape.fft_causal_conv(d, u).unwrap();
    assert!(tape.value(y2).max_abs_diff(&u0) < 1e-5);
}

#[test]
fn fft_conv_rejects_length_mismatch() {
    let mut tape = Tape::new();
    let u = tape.constant(Tensor::zeros(&[5, 2]));
    let k = tape.constant(Tensor::zeros(&[4, 2]));
    assert!(matches!(tape.fft_causal_conv(u, k), Err(Error::Shape { .. })));
}

fn naive_conv(u: &Tensor, k: &Tensor) -> Vec<f64> {
    let (len, ch) = (u.shape()[0], u.shape()[1]);
    let mut y = vec![0.0; len * ch];
    for h in 0..ch {
        for tt in 0..len {
            let mut s = 0.0f64;
            for i in 0..=tt {
                s += k.data()[i * ch + h] as f64 * u.data()[(tt - i) * ch + h] as f64;
            }
            y[tt * ch + h] = s;
        }
    }
    y
}

#[test]
fn fft_conv_matches_direct_sum_for_all_lengths_up_to_64() {
    let mut r = common::rng(4);
    for len in 1..=64 {
        let u = Tensor::randn(&[len, 2], 1.0, &mut r);
        let k = Tensor::randn(&[len, 2], 1.0, &mut r);
        let mut tape = Tape::new();
        let (uv, kv) = (tape.constant(u.clone()), tape.constant(k.clone()));
        let y = tape.fft_causal_conv(uv, kv).unwrap();
        let want = naive_conv(&u, &k);
        for (a, b) in tape.value(y).data().iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-5, "len {len}: {a} vs {b}");
        }
    }
    // L = 7 case from the exported direct helper
    let u: Vec<f64> = (0..7).map(|i| i as f64 * 0.5 - 1.0).collect();
    let k: Vec<f64> = (0..7).map(|i| 1.0 / (i as f64 + 1.0)).collect();
    let direct = causal_conv_direct(&u, &k);
    let fft = s4mt::tensor::causal_conv_fft(&u, &k);
    for (a, b) in direct.iter().zip(&fft) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn batched_conv_matches_per_sequence() {
    let mut r = common::rng(5);
    let u = Tensor::randn(&[3, 20, 2], 1.0, &mut r);
    let k = Tensor::randn(&[20, 2], 1.0, &mut r);
    let mut tape = Tape::new();
    let (uv, kv) = (tape.constant(u.clone()), tape.constant(k.clone()));
    let y = tape.fft_causal_conv(uv, kv).unwrap();
    for b in 0..3 {
        let ub = Tensor::new(&[20, 2], u.data()[b * 40..(b + 1) * 40].to_vec()).unwrap();
        let want = naive_conv(&ub, &k);
        for (a, w) in tape.value(y).data()[b * 40..(b + 1) * 40].iter().zip(&want) {
            assert!((*a as f64 - w).abs() < 1e-5);
        }
    }
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let uniform = tape.param(Tensor::zeros(&[3, 4]));
    let l = tape.cross_entropy(uniform, &[0, 1, 3], &[true; 3]).unwrap();
    assert!((tape.value(l).item() - 4f32.ln()).abs() < 1e-6);

    let mut peaked = Tensor::zeros(&[1, 4]);
    peaked.data_mut()[2] = 100.0;
    let p = tape.param(peaked);
    let l = tape.cross_entropy(p, &[2], &[true]).unwrap();
    assert!(tape.value(l).item() < 1e-30_f32.max(1e-12));

    let l = tape.cross_entropy(uniform, &[0, 1, 3], &[false; 3]).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
    let g = tape.backward(l).unwrap();
    assert!(g.tensor_or_zeros(uniform).data().iter().all(|&v| v == 0.0));

    assert!(matches!(
        tape.cross_entropy(uniform, &[0, 9, 1], &[true; 3]),
        Err(Error::Index { index: 9, .. })
    ));
}

#[test]
fn backward_basic_identities() {
    let mut r = common::rng(6);
    let w0 = Tensor::randn(&[5], 1.0, &mut r);
    let mut tape = Tape::new();
    let w = tape.param(w0.clone());
    let s = tape.sum(w);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.tensor(w).unwrap().data(), &[1.0; 5]);

    let mut tape = Tape::new();
    let w = tape.param(w0.clone());
    let sq = tape.mul(w, w).unwrap();
    let s = tape.sum(sq);
    let half = tape.scale(s, 0.5);
    let g = tape.backward(half).unwrap();
    assert!(g.tensor(w).unwrap().max_abs_diff(&w0) < 1e-6);

    // non-scalar loss is a contract error
    assert!(matches!(tape.backward(sq), Err(Error::Contract(_))));
}

#[test]
fn every_reachable_param_gets_a_grad() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::full(&[2], 1.0));
    let b = tape.param(Tensor::full(&[2], 2.0));
    let unused = tape.param(Tensor::full(&[2], 3.0));
    let c = tape.mul(a, b).unwrap();
    let s = tape.sum(c);
    let g = tape.backward(s).unwrap();
    assert!(g.get(a).is_some() && g.get(b).is_some());
    assert!(g.get(unused).is_none());
    assert_eq!(g.tensor_or_zeros(unused).shape(), &[2]);
}

#[test]
fn attention_identical_keys_average_values() {
    let mut r = common::rng(7);
    let q = Tensor::randn(&[1, 2, 4], 1.0, &mut r);
    let k = Tensor::full(&[1, 3, 4], 0.3);
    let v = Tensor::randn(&[1, 3, 4], 1.0, &mut r);
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v.clone()));
    let o = tape.attention(qv, kv, vv, 2, &AttentionMask::default()).unwrap();
    for i in 0..2 {
        for c in 0..4 {
            let mean = (0..3).map(|j| v.data()[j * 4 + c]).sum::<f32>() / 3.0;
            assert!((tape.value(o).data()[i * 4 + c] - mean).abs() < 1e-6);
        }
    }
}

#[test]
fn attention_fully_masked_row_is_zero() {
    let mut r = common::rng(8);
    let q = Tensor::randn(&[1, 2, 4], 1.0, &mut r);
    let k = Tensor::randn(&[1, 2, 4], 1.0, &mut r);
    let mut tape = Tape::new();
    let (qv, kv) = (tape.constant(q), tape.constant(k));
    let mask = AttentionMask {
        key_valid: Some(vec![false, false]),
        causal: false,
    };
    let o = tape.attention(qv, kv, kv, 1, &mask).unwrap();
    assert!(tape.value(o).data().iter().all(|&v| v == 0.0));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-30.0f32..30.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3, 4], data).unwrap());
        let s = tape.softmax(x, 1).unwrap();
        for row in tape.value(s).data().chunks(4) {
            let total: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_rows_are_centred(data in prop::collection::vec(-50.0f32..50.0, 16)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 8], data).unwrap());
        let g = tape.constant(Tensor::full(&[8], 1.0));
        let b = tape.constant(Tensor::zeros(&[8]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for row in tape.value(y).data().chunks(8) {
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-6);
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut r = common::rng(11);
        let x = Tensor::randn(&[2, 17, 4], 1.0, &mut r);
        let k = Tensor::randn(&[17, 4], 1.0, &mut r);
        let mut tape = Tape::new();
        let (xv, kv) = (tape.constant(x), tape.constant(k));
        let y = tape.fft_causal_conv(xv, kv).unwrap();
        let a = tape.attention(y, y, y, 2, &AttentionMask { key_valid: None, causal: true }).unwrap();
        tape.value(a).clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
