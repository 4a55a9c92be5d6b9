use eyepurify_tensor::{grad_check, gradient, Axis, Mode, Result, RunningStats, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Weighted sum so that every output element gets a distinct upstream gradient.
fn weighted_sum<'t>(y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let w = y.tape().constant(random(&y.shape(), seed));
    Ok(y.mul(w)?.sum())
}

fn assert_check(name: &str, err: f64, tol: f64) {
    assert!(err < tol, "{name}: rel err {err:e} >= {tol:e}");
}

#[test]
fn conv2d_gradients_wrt_input_weight_and_bias() {
    let w = random(&[4, 3, 3, 3], 2);
    let b = random(&[4], 3);
    let x = random(&[2, 3, 6, 5], 1);
    for (stride, pad) in [(1, 1), (2, 1), (2, 0), (1, 0)] {
        let (w1, b1) = (w.clone(), b.clone());
        let r = grad_check(
            move |v: Var<'_, f64>| -> Result<Var<'_, f64>> {
                let t = v.tape();
                let y = v.conv2d(t.constant(w1.clone()), Some(t.constant(b1.clone())), stride, pad)?;
                weighted_sum(y, 9)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_check("conv2d/input", r.max_rel_error, 1e-6);

        let (x1, b1) = (x.clone(), b.clone());
        let r = grad_check(
            move |v: Var<'_, f64>| -> Result<Var<'_, f64>> {
                let t = v.tape();
                let y = t.constant(x1.clone()).conv2d(v, Some(t.constant(b1.clone())), stride, pad)?;
                weighted_sum(y, 9)
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert_check("conv2d/weight", r.max_rel_error, 1e-6);

        let (x1, w1) = (x.clone(), w.clone());
        let r = grad_check(
            move |v: Var<'_, f64>| -> Result<Var<'_, f64>> {
                let t = v.tape();
                let y = t.constant(x1.clone()).conv2d(t.constant(w1.clone()), Some(v), stride, pad)?;
                weighted_sum(y, 9)
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert_check("conv2d/bias", r.max_rel_error, 1e-6);
    }
}

#[test]
fn pointwise_conv_gradients() {
    let w = random(&[3, 2, 1, 1], 5);
    let x = random(&[2, 2, 3, 4], 6);
    let w1 = w.clone();
    let r = grad_check(
        move |v: Var<'_, f64>| -> Result<Var<'_, f64>> {
            let y = v.conv2d(v.tape().constant(w1.clone()), None, 1, 0)?;
            weighted_sum(y, 1)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert_check("pointwise/input", r.max_rel_error, 1e-6);
    let r = grad_check(
        move |v: Var<'_, f64>| -> Result<Var<'_, f64>> {
            let y = v.tape().constant(x.clone()).conv2d(v, None, 1, 0)?;
            weighted_sum(y, 1)
        },
        &w,
        1e-5,
    )
    .unwrap();
    assert_check("pointwise/weight", r.max_rel_error, 1e-6);
}

#[test]
fn conv_transpose_sum_gradient_at_eps_1e_3() {
    // Central differences with eps 1e-3 on a 4x4 input, gradient of sum(output).
    let w = random(&[2, 3, 4, 4], 11);
    let x = random(&[1, 2, 4, 4], 12);
    let w1 = w.clone();
    let r = grad_check(
        move |v: Var<'_, f64>| -> Result<Var<'_, f64>> {
            Ok(v.conv_transpose2d(v.tape().constant(w1.clone()), None, 2, 1)?.sum())
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert_check("conv_transpose/input", r.max_rel_error, 1e-4);
}

#[test]
fn conv_transpose_gradients_wrt_all_inputs() {
    let w = random(&[3, 2, 4, 4], 21);
    let b = random(&[2], 22);
    let x = random(&[2, 3, 3, 4], 23);
    for (stride, pad) in [(2, 1), (1, 0), (3, 2)] {
        let (w1, b1) = (w.clone(), b.clone());
        let r = grad_check(
            move |v: Var<'_, f64>| -> Result<Var<'_, f64>> {
                let t = v.tape();
                let y = v.conv_transpose2d(t.constant(w1.clone()), Some(t.constant(b1.clone())), stride, pad)?;
                weighted_sum(y, 4)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_check("conv_transpose/input", r.max_rel_error, 1e-6);
        let (x1, b1) = (x.clone(), b.clone());
        let r = grad_check(
            move |v: Var<'_, f64>| -> Result<Var<'_, f64>> {
                let t = v.tape();
                let y = t.constant(x1.clone()).conv_transpose2d(v, Some(t.constant(b1.clone())), stride, pad)?;
                weighted_sum(y, 4)
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert_check("conv_transpose/weight", r.max_rel_error, 1e-6);
        let (x1, w1) = (x.clone(), w.clone());
        let r = grad_check(
            move |v: Var<'_, f64>| -> Result<Var<'_, f64>> {
                let t = v.tape();
                let y = t.constant(x1.clone()).conv_transpose2d(t.constant(w1.clone()), Some(v), stride, pad)?;
                weighted_sum(y, 4)
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert_check("conv_transpose/bias", r.max_rel_error, 1e-6);
    }
}

#[test]
fn batch_norm_train_gradients() {
    let x = random(&[2, 3, 4, 4], 31).map(|v| 3.0 * v + 1.0);
    let gamma = random(&[3], 32).map(|v| v + 1.5);
    let beta = random(&[3], 33);
    let (g1, b1) = (gamma.clone(), beta.clone());
    let r = grad_check(
        move |v: Var<'_, f64>| -> Result<Var<'_, f64>> {
            let t = v.tape();
            let mut stats = RunningStats::new(3);
            let y = v.batch_norm2d(t.constant(g1.clone()), t.constant(b1.clone()), Mode::Train, &mut stats)?;
            weighted_sum(y, 7)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert_check("batch_norm/input", r.max_rel_error, 1e-3);
    let (x1, b1) = (x.clone(), beta.clone());
    let r = grad_check(
        move |v: Var<'_, f64>| -> Result<Var<'_, f64>> {
            let t = v.tape();
            let mut stats = RunningStats::new(3);
            let y = t.constant(x1.clone()).batch_norm2d(v, t.constant(b1.clone()), Mode::Train, &mut stats)?;
            weighted_sum(y, 7)
        },
        &gamma,
        1e-5,
    )
    .unwrap();
    assert_check("batch_norm/gamma", r.max_rel_error, 1e-6);
    let r = grad_check(
        move |v: Var<'_, f64>| -> Result<Var<'_, f64>> {
            let t = v.tape();
            let mut stats = RunningStats::from_parts(vec![0.5, -0.2, 0.1], vec![2.0, 0.5, 1.0]);
            let y = v.batch_norm2d(t.constant(gamma.clone()), t.constant(beta.clone()), Mode::Eval, &mut stats)?;
            weighted_sum(y, 7)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert_check("batch_norm/eval-input", r.max_rel_error, 1e-6);
}

fn batch_norm_objective<'t, T: eyepurify_tensor::Element>(v: Var<'t, T>) -> Result<Var<'t, T>> {
    let t = v.tape();
    let mut stats = RunningStats::new(3);
    let y = v.batch_norm2d(t.constant(Tensor::ones(&[3])), t.constant(Tensor::zeros(&[3])), Mode::Train, &mut stats)?;
    let w = t.constant(random(&y.shape(), 3).cast::<T>());
    Ok(y.mul(w)?.sum())
}

// The input gradient sums to zero per channel, so f32 differences cannot resolve it;
// compare against the f64 analytic gradient instead.
#[test]
fn batch_norm_gradient_in_single_precision() {
    let x = random(&[2, 3, 4, 4], 41).map(|v| 2.0 * v);
    let (_, g64) = gradient(&batch_norm_objective::<f64>, &x).unwrap();
    let (_, g32) = gradient(&batch_norm_objective::<f32>, &x.cast::<f32>()).unwrap();
    let scale = g64.max_abs();
    let worst = g64
        .data()
        .iter()
        .zip(g32.data())
        .map(|(a, b)| (a - *b as f64).abs() / scale)
        .fold(0.0, f64::max);
    assert_check("batch_norm/f32", worst, 1e-3);
}

type UnaryCase = dyn for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>;

#[test]
fn elementwise_and_spatial_gradients() {
    let x = random(&[2, 2, 5, 6], 51);
    let mask = random(&[1, 1, 5, 6], 52);
    let other = random(&[1, 2, 5, 6], 53);
    let cases: Vec<(&str, Box<UnaryCase>)> = vec![
        ("relu", Box::new(|v| weighted_sum(v.relu(), 1))),
        ("tanh", Box::new(|v| weighted_sum(v.tanh(), 1))),
        ("scaled_tanh", Box::new(|v| weighted_sum(v.scaled_tanh(), 1))),
        ("square", Box::new(|v| weighted_sum(v.square(), 1))),
        ("reflection_pad", Box::new(|v| weighted_sum(v.reflection_pad2d(2)?, 1))),
        ("crop", Box::new(|v| weighted_sum(v.crop2d(1, 2, 3, 3)?, 1))),
        ("center_crop", Box::new(|v| weighted_sum(v.center_crop(1)?, 1))),
        ("max_pool", Box::new(|v| weighted_sum(v.max_pool2d()?, 1))),
        ("diff_h", Box::new(|v| weighted_sum(v.diff(Axis::Height)?, 1))),
        ("diff_w", Box::new(|v| weighted_sum(v.diff(Axis::Width)?, 1))),
        ("gram", Box::new(|v| weighted_sum(v.gram()?, 1))),
        ("sum_per_sample", Box::new(|v| weighted_sum(v.sum_per_sample(), 1))),
        ("sum_squares_per_sample", Box::new(|v| weighted_sum(v.sum_squares_per_sample(), 1))),
        ("mean", Box::new(|v| Ok(v.square().mean()))),
        ("shift", Box::new(|v| weighted_sum(v.shift_channels(&[1.0, -2.0])?.square(), 1))),
        ("mul_mask", Box::new(move |v| {
            let m = v.tape().constant(mask.clone());
            weighted_sum(v.mul_mask(m)?, 1)
        })),
        ("sub_broadcast", Box::new(move |v| {
            let o = v.tape().constant(other.clone());
            weighted_sum(v.sub(o)?.square(), 1)
        })),
    ];
    for (name, f) in cases {
        let r = grad_check(|v| f(v), &x, 1e-6).unwrap();
        assert_check(name, r.max_rel_error, 1e-6);
    }
}

#[test]
fn mask_and_broadcast_operand_gradients() {
    let x = random(&[2, 3, 4, 4], 61);
    let m = random(&[2, 1, 4, 4], 62);
    let x1 = x.clone();
    let r = grad_check(
        move |v: Var<'_, f64>| -> Result<Var<'_, f64>> {
            weighted_sum(v.tape().constant(x1.clone()).mul_mask(v)?, 2)
        },
        &m,
        1e-6,
    )
    .unwrap();
    assert_check("mul_mask/mask", r.max_rel_error, 1e-6);
    let b = random(&[1, 3, 4, 4], 63);
    let r = grad_check(
        move |v: Var<'_, f64>| -> Result<Var<'_, f64>> {
            weighted_sum(v.tape().constant(x.clone()).sub(v)?.square(), 2)
        },
        &b,
        1e-6,
    )
    .unwrap();
    assert_check("sub/broadcast operand", r.max_rel_error, 1e-6);
}

#[test]
fn single_precision_ops_within_1e_3() {
    let x = random(&[1, 2, 6, 6], 71).map(|v| 0.5 * (v + 1.0)).cast::<f32>();
    let w = random(&[3, 2, 3, 3], 72).map(|v| 0.5 * (v + 1.0)).cast::<f32>();
    let r = grad_check(
        move |v: Var<'_, f32>| -> Result<Var<'_, f32>> {
            let t = v.tape();
            let y = v.conv2d(t.constant(w.clone()), None, 1, 1)?.scale(0.1).tanh();
            Ok(y.sum())
        },
        &x,
        1e-2,
    )
    .unwrap();
    assert_check("conv+tanh/f32", r.max_rel_error, 1e-3);
}
