use eyepurify::model_io::ModelFile;
use eyepurify::transform::{shape_plan, Preset, TransformConfig, TransformNet};
use eyepurify::Error;
use eyepurify_tensor::gradcheck::compare_gradient;
use eyepurify_tensor::{Mode, Tape, Tensor};
use proptest::prelude::*;
use rand::rngs::mock::StepRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(b: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[b, 3, h, w], |_| rng.gen_range(0.0..255.0))
}

#[test]
fn shape_preserving_plan_covers_all_even_sizes() {
    let cfg = TransformConfig::default();
    for h in (32..=512).step_by(2) {
        for w in (32..=512).step_by(2) {
            let plan = shape_plan(&cfg, h, w).unwrap();
            assert_eq!(plan.last().unwrap().1, [3, h, w], "{h}x{w}");
        }
    }
}

#[test]
fn table_faithful_output_shrinks_by_forty() {
    let cfg = TransformConfig::new(Preset::TableFaithful);
    for (h, w) in [(256, 256), (128, 192), (512, 512)] {
        let plan = shape_plan(&cfg, h, w).unwrap();
        assert_eq!(plan.last().unwrap().1, [3, h - 40, w - 40]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn forward_is_bounded_and_keeps_even_sizes(
        hh in 16usize..48, hw in 16usize..48, seed in 0u64..1000, scale in 0.0f32..4.0,
    ) {
        let (h, w) = (2 * hh, 2 * hw);
        let net = TransformNet::<f32>::new(TransformConfig::tiny(Preset::ShapePreserving), seed).unwrap();
        let x = random_image(1, h, w, seed).map(|v| v * scale - 300.0 * (scale - 1.0));
        let y = net.forward(&x).unwrap();
        prop_assert_eq!(y.shape(), &[1, 3, h, w]);
        prop_assert!(y.data().iter().all(|v| v.is_finite() && (0.0..=255.0).contains(v)));
    }
}

#[test]
fn train_mode_parameter_gradients_match_finite_differences() {
    let net = TransformNet::<f32>::new(TransformConfig::tiny(Preset::ShapePreserving), 11)
        .unwrap()
        .cast::<f64>();
    let x = random_image(2, 32, 32, 12).cast::<f64>();
    let target = random_image(2, 32, 32, 13).cast::<f64>();

    let loss_with = |k: usize, p: Option<&Tensor<f64>>| -> (f64, Option<Tensor<f64>>) {
        let tape = Tape::new();
        let mut params = net.bind(&tape, true);
        if let Some(p) = p {
            params[k] = tape.leaf(p.clone(), true);
        }
        let mut stats = net.running_stats().to_vec();
        let mut rng = StepRng::new(0, 0);
        let out = net
            .forward_with(&params, &mut stats, tape.constant(x.clone()), Mode::Train, &mut rng)
            .unwrap();
        let loss = out.sub(tape.constant(target.clone())).unwrap().square().mean();
        let value = loss.item();
        let grads = tape.backward(loss).unwrap();
        (value, grads.get(params[k]).cloned())
    };

    // Inputs reach 255, so larger steps cross ReLU kinks in the first layers.
    let n = net.params().len();
    let mut checked = 0;
    for k in [0, 1, n / 2, n - 2, n - 1] {
        let p0 = (*net.params()[k].value).clone();
        let (_, analytic) = loss_with(k, None);
        let analytic = analytic.expect("parameter gradient");
        assert!(analytic.max_abs() > 0.0, "{} has a zero gradient", net.params()[k].name);
        let stride = (p0.len() / 8).max(1);
        let report = compare_gradient(
            |p: &Tensor<f64>| Ok(loss_with(k, Some(p)).0),
            &analytic,
            &p0,
            1e-6,
            (0..p0.len()).step_by(stride),
        )
        .unwrap();
        assert!(
            report.max_rel_error < 1e-3,
            "{}: relative error {:.3e}",
            net.params()[k].name,
            report.max_rel_error
        );
        checked += report.checked;
    }
    assert!(checked >= 20);
}

#[test]
fn seeds_give_reproducible_networks() {
    let cfg = TransformConfig::tiny(Preset::TableFaithful);
    let a = TransformNet::<f32>::new(cfg, 5).unwrap();
    let b = TransformNet::<f32>::new(cfg, 5).unwrap();
    let c = TransformNet::<f32>::new(cfg, 6).unwrap();
    let x = random_image(1, 48, 48, 1);
    assert_eq!(a.forward(&x).unwrap().data(), b.forward(&x).unwrap().data());
    assert_ne!(a.params()[0].value.data(), c.params()[0].value.data());
}

#[test]
fn save_and_load_reproduce_forward_bit_for_bit() {
    let mut net = TransformNet::<f32>::new(TransformConfig::tiny(Preset::ShapePreserving), 21).unwrap();
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = tape.constant(random_image(2, 40, 40, 22));
    net.forward_train(&tape, batch, &mut rng).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.bin");
    net.save(&path).unwrap();
    let back = TransformNet::<f32>::load(&path).unwrap();
    let x = random_image(1, 40, 40, 23);
    assert_eq!(net.forward(&x).unwrap().data(), back.forward(&x).unwrap().data());
    for ((_, s), (_, t)) in net.running_stats().iter().zip(back.running_stats()) {
        assert_eq!(s, t);
    }
}

#[test]
fn corrupted_model_files_are_rejected() {
    let net = TransformNet::<f32>::new(TransformConfig::tiny(Preset::ShapePreserving), 2).unwrap();
    let bytes = net.to_model_file().to_bytes();
    for i in [0, 4, 9, bytes.len() / 2, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[i] ^= 0x40;
        assert!(ModelFile::from_bytes(&bad).is_err(), "flipped byte {i} accepted");
    }
    assert!(ModelFile::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let loss_net = eyepurify::lossnet::LossNet::seeded(0);
    let file = ModelFile::from_bytes(&loss_net.to_model_file().to_bytes()).unwrap();
    assert!(matches!(TransformNet::<f32>::from_model_file(&file), Err(Error::Topology(_))));
}
