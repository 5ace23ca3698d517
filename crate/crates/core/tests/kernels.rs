mod common;

use common::*;
use lensformer::{Tape, Tensor};
use proptest::prelude::*;

fn conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let tape = Tape::new();
    let out = tape.constant(x.clone()).conv2d(&tape.constant(k.clone()), stride, pad).unwrap();
    (*out.value()).clone()
}

#[test]
fn conv_matches_six_loop_oracle_bit_for_bit() {
    let mut r = rng(11);
    for (ci, co, h, w, kh, stride, pad) in
        [(1, 1, 5, 5, 3, 1, 0), (2, 3, 6, 6, 3, 1, 1), (3, 2, 7, 9, 3, 2, 1), (4, 8, 8, 8, 5, 1, 2), (2, 2, 4, 4, 1, 1, 0)]
    {
        let x = random_tensor(&mut r, &[ci, h, w], -1.0, 1.0);
        let k = random_tensor(&mut r, &[co, ci, kh, kh], -1.0, 1.0);
        assert_eq!(conv(&x, &k, stride, pad), naive_conv2d(&x, &k, stride, pad), "geometry {ci} {co} {h}x{w} k{kh}");
    }
}

#[test]
fn conv_rejects_kernel_larger_than_padded_input() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 2]));
    let k = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(x.conv2d(&k, 1, 0).is_err());
    let k_bad_channels = tape.constant(Tensor::zeros(&[1, 2, 1, 1]));
    assert!(x.conv2d(&k_bad_channels, 1, 0).is_err());
}

#[test]
fn matmul_and_dense_match_triple_loop() {
    let mut r = rng(12);
    let a = random_tensor(&mut r, &[5, 7], -1.0, 1.0);
    let b = random_tensor(&mut r, &[7, 3], -1.0, 1.0);
    let bias = random_tensor(&mut r, &[3], -1.0, 1.0);
    let tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    assert_eq!(*va.matmul(&vb).unwrap().value(), naive_matmul(&a, &b));
    let dense = va.dense(&vb, &tape.constant(bias.clone())).unwrap().value();
    let mut expect = naive_matmul(&a, &b);
    for (i, v) in expect.data_mut().iter_mut().enumerate() {
        *v += bias.data()[i % 3];
    }
    assert_eq!(*dense, expect);
}

#[test]
fn batched_matmul_is_per_slice_matmul() {
    let mut r = rng(13);
    let a = random_tensor(&mut r, &[3, 2, 4], -1.0, 1.0);
    let b = random_tensor(&mut r, &[4, 5], -1.0, 1.0);
    let tape = Tape::new();
    let out = tape.constant(a.clone()).matmul(&tape.constant(b.clone())).unwrap().value();
    assert_eq!(out.shape(), &[3, 2, 5]);
    for s in 0..3 {
        let slice = Tensor::new(vec![2, 4], a.data()[s * 8..(s + 1) * 8].to_vec()).unwrap();
        assert_eq!(&out.data()[s * 10..(s + 1) * 10], naive_matmul(&slice, &b).data());
    }
}

#[test]
fn max_pool_picks_window_maxima() {
    let x = Tensor::from_f64(&[1, 4, 4], &(0..16).map(|i| ((i * 7) % 16) as f64).collect::<Vec<_>>()).unwrap();
    let tape = Tape::new();
    let out = tape.constant(x.clone()).max_pool(2).unwrap().value();
    for oy in 0..2 {
        for ox in 0..2 {
            let m = (0..2)
                .flat_map(|dy| (0..2).map(move |dx| (dy, dx)))
                .map(|(dy, dx)| x.at(&[0, 2 * oy + dy, 2 * ox + dx]))
                .fold(f64::MIN, f64::max);
            assert_eq!(out.at(&[0, oy, ox]), m);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_oracle_on_random_geometry(
        ci in 1usize..4, co in 1usize..4, h in 3usize..9, w in 3usize..9,
        k in 1usize..4, stride in 1usize..3, pad in 0usize..2, seed in any::<u64>()
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[ci, h, w], -1.0, 1.0);
        let kern = random_tensor(&mut r, &[co, ci, k, k], -1.0, 1.0);
        prop_assert_eq!(conv(&x, &kern, stride, pad), naive_conv2d(&x, &kern, stride, pad));
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..50.0, seed in any::<u64>()) {
        let x = random_tensor(&mut rng(seed), &[rows, cols], -scale, scale);
        let tape = Tape::new();
        let y = tape.constant(x.clone()).softmax(1).unwrap().value();
        for r in 0..rows {
            let row = &y.data()[r * cols..(r + 1) * cols];
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        // Shifting a row by a constant leaves it unchanged.
        let shifted = tape.constant(x.map(|v| v + 123.0)).softmax(1).unwrap().value();
        for (a, b) in y.data().iter().zip(shifted.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_f32_rows_sum_to_one(cols in 1usize..64, seed in any::<u64>()) {
        let x: Tensor<f32> = random_tensor(&mut rng(seed), &[3, cols], -30.0, 30.0).cast();
        let tape = Tape::new();
        let y = tape.constant(x).softmax(1).unwrap().value();
        for r in 0..3 {
            let s: f64 = y.data()[r * cols..(r + 1) * cols].iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_standardises_rows(cols in 2usize..16, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[4, cols], -5.0, 5.0);
        let tape = Tape::new();
        let y = tape
            .constant(x)
            .layer_norm(&tape.constant(Tensor::ones(&[cols])), &tape.constant(Tensor::zeros(&[cols])))
            .unwrap()
            .value();
        for row in y.data().chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!(var < 1.0 + 1e-9 && var > 0.99);
        }
    }

    #[test]
    fn elu_and_sigmoid_match_formulas(v in -20.0f64..20.0) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(v));
        let elu = x.elu().value().item();
        let sig = x.sigmoid().value().item();
        let elu_ref = if v > 0.0 { v } else { v.exp() - 1.0 };
        prop_assert!((elu - elu_ref).abs() <= 1e-15 * elu_ref.abs().max(1.0));
        prop_assert!((sig - 1.0 / (1.0 + (-v).exp())).abs() < 1e-15);
    }
}
