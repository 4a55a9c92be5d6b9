use eyepurify::loss::{content_loss_global, style_gram, style_loss_global, tv_loss, GramNormalization};
use eyepurify::masks::{downsample_masks, repair_orphans, SemanticMask, IRIS, PUPIL};
use eyepurify::metrics::{fit_ellipse, pupil_center_diff};
use eyepurify::optim::{projected_lbfgs, Adam, FnObjective, LbfgsConfig};
use eyepurify::synth::disc_mask;
use eyepurify_tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn total(v: eyepurify_tensor::Var<'_, f64>) -> f64 {
    v.value().data().iter().sum()
}

/// Random SPD matrix `Q D Qᵀ` with eigenvalues in `[1, cond]`.
fn spd(dim: usize, cond: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-3 {
            q.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    let eig: Vec<f64> = (0..dim)
        .map(|i| if dim == 1 { 1.0 } else { 1.0 + (cond - 1.0) * i as f64 / (dim - 1) as f64 })
        .collect();
    let mut a = vec![0.0; dim * dim];
    for (k, u) in q.iter().enumerate() {
        for i in 0..dim {
            for j in 0..dim {
                a[i * dim + j] += eig[k] * u[i] * u[j];
            }
        }
    }
    a
}

fn quadratic(a: Vec<f64>, b: Vec<f64>) -> impl FnMut(&[f64]) -> (f64, Vec<f64>) {
    let n = b.len();
    move |x: &[f64]| {
        let ax: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum()).collect();
        let f = 0.5 * x.iter().zip(&ax).map(|(p, q)| p * q).sum::<f64>() - x.iter().zip(&b).map(|(p, q)| p * q).sum::<f64>();
        let g = ax.iter().zip(&b).map(|(p, q)| p - q).collect();
        (f, g)
    }
}

fn ellipse_points(cx: f64, cy: f64, a: f64, b: f64, theta: f64, n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|k| {
            let t = 2.0 * std::f64::consts::PI * k as f64 / n as f64 + 0.1;
            let (x, y) = (a * t.cos(), b * t.sin());
            (cx + x * theta.cos() - y * theta.sin(), cy + x * theta.sin() + y * theta.cos())
        })
        .collect()
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(std::f64::consts::PI);
    d.min(std::f64::consts::PI - d)
}

/// Iris disc with scattered pupil pixels, some of them outside the iris.
fn noisy_mask(seed: u64) -> SemanticMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (40, 48);
    let (cx, cy, r) = (rng.gen_range(15.0..33.0), rng.gen_range(12.0..28.0), rng.gen_range(4.0..11.0));
    let density = rng.gen_range(0.0..0.2);
    let mut pupil = vec![0.0f32; h * w];
    let mut iris = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if (x as f64 - cx).hypot(y as f64 - cy) <= r {
                iris[i] = 1.0;
            }
            if rng.gen_bool(density) {
                pupil[i] = 1.0;
            }
        }
    }
    SemanticMask::new(h, w, pupil, iris).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn content_and_style_terms_are_non_negative(seed in 0u64..100_000) {
        let tape = Tape::new();
        let fo = tape.constant(random(&[2, 3, 5, 4], seed, -2.0, 2.0));
        let fi = tape.constant(random(&[2, 3, 5, 4], seed + 1, -2.0, 2.0));
        prop_assert!(total(content_loss_global(fo, fi).unwrap()) > 0.0);
        for norm in [GramNormalization::Raw, GramNormalization::ByElements] {
            let t = tape.constant(style_gram(&random(&[1, 3, 5, 4], seed + 2, -2.0, 2.0), None, norm).unwrap());
            prop_assert!(total(style_loss_global(fo, t, norm).unwrap()) >= 0.0);
        }
        prop_assert!(total(tv_loss(fo).unwrap()) >= 0.0);
    }

    #[test]
    fn content_loss_is_quadratic_in_the_offset(seed in 0u64..100_000, k in 0.1f64..4.0) {
        let base = random(&[1, 3, 4, 4], seed, -1.0, 1.0);
        let delta = random(&[1, 3, 4, 4], seed + 1, -1.0, 1.0);
        let tape = Tape::new();
        let fi = tape.constant(base.clone());
        let one = tape.constant(base.zip_map(&delta, |a, d| a + d));
        let scaled = tape.constant(base.zip_map(&delta, |a, d| a + k * d));
        let l1 = total(content_loss_global(one, fi).unwrap());
        let lk = total(content_loss_global(scaled, fi).unwrap());
        prop_assert!((lk - k * k * l1).abs() <= 1e-10 * lk.max(1.0));
    }

    #[test]
    fn gram_targets_are_symmetric_psd(seed in 0u64..100_000) {
        let f = random(&[1, 4, 3, 5], seed, -2.0, 2.0);
        let g = style_gram(&f, None, GramNormalization::Raw).unwrap();
        let n = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..n {
            prop_assert!(g.data()[i * n + i] >= 0.0);
            for j in 0..n {
                prop_assert!((g.data()[i * n + j] - g.data()[j * n + i]).abs() < 1e-12);
            }
        }
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| v[i] * g.data()[i * n + j] * v[j]).sum();
        prop_assert!(q >= -1e-9);
    }

    #[test]
    fn tv_ignores_constant_offsets(seed in 0u64..100_000, c in -50.0f64..50.0) {
        let img = random(&[1, 3, 6, 7], seed, 0.0, 200.0);
        let tape = Tape::new();
        let a = total(tv_loss(tape.constant(img.clone())).unwrap());
        let b = total(tv_loss(tape.constant(img.map(|v| v + c))).unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        let flat = total(tv_loss(tape.constant(Tensor::full(&[1, 3, 6, 7], c))).unwrap());
        prop_assert_eq!(flat, 0.0);
    }

    #[test]
    fn repair_is_idempotent_and_contains_pupil(seed in 0u64..100_000) {
        let mask = noisy_mask(seed);
        let (once, _) = repair_orphans(&mask).unwrap();
        let (twice, outcome) = repair_orphans(&once).unwrap();
        prop_assert_eq!(once.pupil(), twice.pupil());
        prop_assert_eq!(once.iris(), twice.iris());
        prop_assert!(!outcome.orphan_fixed && outcome.clipped == 0);
        prop_assert!(once.support_count(PUPIL) > 0);
        for (p, i) in once.support(PUPIL).iter().zip(once.support(IRIS)) {
            prop_assert!(!p || i);
        }
    }

    #[test]
    fn mask_pyramid_preserves_mass(cx in 20.0f64..44.0, cy in 20.0f64..44.0, r in 6.0f64..16.0) {
        let mask = disc_mask(64, 64, cx, cy, r);
        let full: f64 = mask.iris().iter().map(|&v| v as f64).sum();
        let layers = downsample_masks(&mask, (64, 64), &["conv1_1", "conv2_1", "conv3_1"]).unwrap();
        for (layer, stride) in [("conv1_1", 1.0), ("conv2_1", 2.0), ("conv3_1", 4.0)] {
            let t = layers.get(layer).unwrap();
            let plane = t.shape()[1] * t.shape()[2];
            let mass: f64 = t.data()[plane..2 * plane].iter().map(|&v| v as f64).sum();
            prop_assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((mass * stride * stride - full).abs() <= 0.05 * full);
        }
    }

    #[test]
    fn ellipse_fit_is_translation_equivariant(a in 4.0f64..20.0, ratio in 0.3f64..0.95, theta in -1.5f64..1.5,
                                               dx in -50.0f64..50.0, dy in -50.0f64..50.0) {
        let pts = ellipse_points(30.0, 25.0, a, a * ratio, theta, 30);
        let moved: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x + dx, y + dy)).collect();
        let e0 = fit_ellipse(&pts).unwrap();
        let e1 = fit_ellipse(&moved).unwrap();
        prop_assert!((e1.cx - e0.cx - dx).abs() < 1e-6);
        prop_assert!((e1.cy - e0.cy - dy).abs() < 1e-6);
        prop_assert!(angle_diff(e1.theta, e0.theta) < 1e-6);
        prop_assert!((e1.a - e0.a).abs() < 1e-6 && (e1.b - e0.b).abs() < 1e-6);
    }

    #[test]
    fn ellipse_fit_is_rotation_equivariant(a in 4.0f64..20.0, ratio in 0.3f64..0.9, theta in -1.5f64..1.5,
                                            phi in -3.0f64..3.0) {
        let pts = ellipse_points(30.0, 25.0, a, a * ratio, theta, 30);
        let (s, c) = phi.sin_cos();
        let rot = |(x, y): (f64, f64)| (c * x - s * y, s * x + c * y);
        let rotated: Vec<(f64, f64)> = pts.iter().map(|&p| rot(p)).collect();
        let e0 = fit_ellipse(&pts).unwrap();
        let e1 = fit_ellipse(&rotated).unwrap();
        let (ex, ey) = rot((e0.cx, e0.cy));
        prop_assert!((e1.cx - ex).abs() < 1e-6 && (e1.cy - ey).abs() < 1e-6);
        prop_assert!(angle_diff(e1.theta, e0.theta + phi) < 1e-6);
    }

    #[test]
    fn pupil_center_diff_is_symmetric(ax in 15.0f64..45.0, ay in 15.0f64..45.0, bx in 15.0f64..45.0,
                                      by in 15.0f64..45.0, r in 3.0f64..9.0) {
        let a = disc_mask(60, 60, ax, ay, r);
        let b = disc_mask(60, 60, bx, by, r * 1.1);
        prop_assert_eq!(pupil_center_diff(&a, &b).unwrap(), pupil_center_diff(&b, &a).unwrap());
    }

    #[test]
    fn lbfgs_solves_convex_quadratics(dim in 1usize..9, cond in 1.0f64..20.0, seed in 0u64..100_000) {
        let a = spd(dim, cond, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let b: Vec<f64> = (0..dim).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let init: Vec<f64> = (0..dim).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let cfg = LbfgsConfig {
            max_iter: dim + 5,
            memory: dim.max(1),
            tolerance: 0.0,
            grad_tolerance: 1e-8 / (dim as f64).sqrt(),
            lower: -1e6,
            upper: 1e6,
            ..Default::default()
        };
        let mut f = quadratic(a, b);
        let out = projected_lbfgs(&mut FnObjective(&mut f), &init, &cfg, |_| {}).unwrap();
        let (_, g) = f(&out.x);
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(gnorm < 1e-8, "gradient norm {gnorm:e} after {} iterations ({:?}) {:?}", out.reports.len() - 1, out.stop, out.reports.iter().map(|r| r.objective).collect::<Vec<_>>());
    }

    #[test]
    fn lbfgs_iterates_stay_in_the_box(dim in 2usize..12, seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target: Vec<f64> = (0..dim).map(|_| rng.gen_range(-100.0..400.0)).collect();
        let init: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.0..255.0)).collect();
        let t = target.clone();
        // Convex but not quadratic.
        let mut obj = FnObjective(move |x: &[f64]| {
            let f = x.iter().zip(&t).map(|(a, b)| (a - b).powi(2) + (a - b).powi(4) / 1e4).sum();
            let g = x.iter().zip(&t).map(|(a, b)| 2.0 * (a - b) + 4.0 * (a - b).powi(3) / 1e4).collect();
            (f, g)
        });
        let cfg = LbfgsConfig { max_iter: 200, tolerance: 0.0, ..Default::default() };
        let mut seen = Vec::new();
        let out = projected_lbfgs(&mut obj, &init, &cfg, |r| seen.push(r.objective)).unwrap();
        prop_assert!(out.x.iter().all(|v| (0.0..=255.0).contains(v)));
        // Non-increasing, up to the rounding allowance of the line search.
        prop_assert!(seen.windows(2).all(|w| w[1] <= w[0] + 4.0 * f64::EPSILON * w[0].abs()));
        for (x, t) in out.x.iter().zip(&target) {
            prop_assert!((x - t.clamp(0.0, 255.0)).abs() < 1e-3, "{:?} vs {:?} ({:?}, {} iters)", out.x, target, out.stop, seen.len());
        }
    }

    #[test]
    fn adam_first_step_is_scale_invariant(seed in 0u64..100_000, k in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gk: Vec<f64> = g.iter().map(|v| v * k).collect();
        let mut p1 = vec![0.5f64; 6];
        let mut p2 = p1.clone();
        Adam::new(1e-3).step(&mut [&mut p1[..]], &[&g[..]]).unwrap();
        Adam::new(1e-3).step(&mut [&mut p2[..]], &[&gk[..]]).unwrap();
        for ((a, b), gi) in p1.iter().zip(&p2).zip(&g) {
            let (s1, s2) = (a - 0.5, b - 0.5);
            prop_assert!(s1 * s2 >= 0.0);
            prop_assert!(s1 * gi <= 0.0);
            // |step| = lr |g| / (|g| + eps) at step 1, so scaling moves it by O(eps).
            prop_assert!((s1 - s2).abs() <= 1e-3 * 1e-8 * (1.0 / gi.abs() + 1.0 / (k * gi.abs())) + 1e-15);
        }
    }
}

#[test]
fn lbfgs_reaches_interior_and_clipped_minimizers() {
    let c: Vec<f64> = (0..16).map(|i| 10.0 + 15.0 * i as f64).collect();
    let cc = c.clone();
    let mut obj = FnObjective(move |x: &[f64]| {
        let f = x.iter().zip(&cc).map(|(a, b)| (a - b).powi(2)).sum();
        (f, x.iter().zip(&cc).map(|(a, b)| 2.0 * (a - b)).collect())
    });
    let cfg = LbfgsConfig { max_iter: 20, tolerance: 0.0, ..Default::default() };
    let out = projected_lbfgs(&mut obj, &[128.0; 16], &cfg, |_| {}).unwrap();
    for (x, t) in out.x.iter().zip(&c) {
        assert!((x - t).abs() < 1e-6, "{x} vs {t}");
    }

    let mut outside = FnObjective(|x: &[f64]| {
        let t = [-40.0, 300.0, 100.0];
        let f = x.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum();
        (f, x.iter().zip(&t).map(|(a, b)| 2.0 * (a - b)).collect())
    });
    let out = projected_lbfgs(&mut outside, &[50.0, 50.0, 50.0], &cfg, |_| {}).unwrap();
    assert!(out.x[0].abs() < 1e-9 && (out.x[1] - 255.0).abs() < 1e-9 && (out.x[2] - 100.0).abs() < 1e-6);
}
