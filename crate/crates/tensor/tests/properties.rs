use eyepurify_tensor::{conv_output_size, conv_transpose_output_size, pairwise_sum, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let tape = Tape::new();
    let y = tape.constant(x.clone()).conv2d(tape.constant(w.clone()), None, stride, pad).unwrap();
    (*y.value()).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_linear_in_its_input(seed in 0u64..10_000, h in 3usize..9, w in 3usize..9,
                                   stride in 1usize..3, pad in 0usize..2, a in -2.0f64..2.0) {
        let x1 = random(&[2, 2, h, w], seed);
        let x2 = random(&[2, 2, h, w], seed + 1);
        let k = random(&[3, 2, 3, 3], seed + 2);
        let combined = x1.zip_map(&x2, |p, q| a * p + q);
        let lhs = conv(&combined, &k, stride, pad);
        let y1 = conv(&x1, &k, stride, pad);
        let y2 = conv(&x2, &k, stride, pad);
        for ((l, p), q) in lhs.data().iter().zip(y1.data()).zip(y2.data()) {
            prop_assert!((l - (a * p + q)).abs() < 1e-10);
        }
    }

    #[test]
    fn stride_two_down_then_up_restores_even_sizes(half_h in 2usize..40, half_w in 2usize..40) {
        let (h, w) = (2 * half_h, 2 * half_w);
        let dh = conv_output_size(h, 3, 2, 1).unwrap();
        let dw = conv_output_size(w, 3, 2, 1).unwrap();
        prop_assert_eq!(conv_transpose_output_size(dh, 4, 2, 1).unwrap(), h);
        prop_assert_eq!(conv_transpose_output_size(dw, 4, 2, 1).unwrap(), w);
    }

    #[test]
    fn conv_transpose_output_shape_matches_helper(seed in 0u64..10_000, h in 1usize..7, w in 1usize..7) {
        let tape = Tape::new();
        let x = tape.constant(random(&[1, 3, h, w], seed));
        let k = tape.constant(random(&[3, 2, 4, 4], seed + 1));
        let y = x.conv_transpose2d(k, None, 2, 1).unwrap();
        prop_assert_eq!(y.shape(), vec![
            1, 2,
            conv_transpose_output_size(h, 4, 2, 1).unwrap(),
            conv_transpose_output_size(w, 4, 2, 1).unwrap(),
        ]);
    }

    #[test]
    fn forward_and_backward_are_deterministic(seed in 0u64..10_000) {
        let x = random(&[2, 2, 7, 5], seed);
        let k = random(&[4, 2, 3, 3], seed + 1);
        let run = || {
            let tape = Tape::new();
            let v = tape.leaf(x.clone(), true);
            let y = v.conv2d(tape.constant(k.clone()), None, 1, 1).unwrap().tanh().square().sum();
            let g = tape.backward(y).unwrap();
            (y.item(), g.get(v).unwrap().clone())
        };
        let (a, ga) = run();
        let (b, gb) = run();
        prop_assert_eq!(a.to_bits(), b.to_bits());
        prop_assert_eq!(ga.data(), gb.data());
    }

    #[test]
    fn pairwise_sum_matches_naive_within_rounding(values in prop::collection::vec(-1e3f64..1e3, 1..500)) {
        let naive: f64 = values.iter().sum();
        let bound = 1e-12 * values.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
        prop_assert!((pairwise_sum(&values) - naive).abs() <= bound);
    }

    #[test]
    fn reflection_pad_then_center_crop_is_identity(seed in 0u64..10_000, h in 3usize..8, w in 3usize..8, pad in 1usize..3) {
        prop_assume!(pad < h.min(w));
        let x = random(&[1, 2, h, w], seed);
        let tape = Tape::new();
        let y = tape.constant(x.clone()).reflection_pad2d(pad).unwrap().center_crop(pad).unwrap();
        let out = y.value();
        prop_assert_eq!(out.data(), x.data());
    }
}
