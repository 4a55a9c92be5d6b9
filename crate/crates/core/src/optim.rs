//! Projected L-BFGS over images and Adam training of the transform network.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::time::Instant;

use eyepurify_tensor::{Element, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::image_io::{read_image, resize_bilinear, Image};
use crate::loss::{total_loss, Breakdown, ContentTarget, ImageObjective, LossConfig, StyleTarget};
use crate::lossnet::LossNet;
use crate::masks::{decode_mask, downsample_masks, repair_orphans, LayerMasks, SemanticMask};
use crate::transform::{NamedParam, TransformConfig, TransformNet};

pub const PIXEL_MIN: f64 = 0.0;
pub const PIXEL_MAX: f64 = 255.0;

/// I.i.d. uniform `[0, 255]` pixels.
pub fn white_noise_image(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(height, width, |_, _, _| rng.gen_range(0.0..=255.0f32))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeReport {
    pub iter: usize,
    pub objective: f64,
    pub breakdown: Breakdown,
    /// Wall-clock milliseconds spent on this iteration.
    pub ms: f64,
}

/// Objective value, gradient and optional loss breakdown at a point.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub value: f64,
    pub grad: Vec<f64>,
    pub breakdown: Breakdown,
}

pub trait Objective {
    fn evaluate(&mut self, x: &[f64]) -> Result<Evaluation>;
}

/// Adapts a closure returning `(value, gradient)`.
pub struct FnObjective<F>(pub F);

impl<F: FnMut(&[f64]) -> (f64, Vec<f64>)> Objective for FnObjective<F> {
    fn evaluate(&mut self, x: &[f64]) -> Result<Evaluation> {
        let (value, grad) = (self.0)(x);
        Ok(Evaluation {
            value,
            grad,
            breakdown: Breakdown::default(),
        })
    }
}

impl<T: Element> Objective for ImageObjective<'_, T> {
    fn evaluate(&mut self, x: &[f64]) -> Result<Evaluation> {
        let t = Tensor::new(self.shape(), x.iter().map(|&v| T::lit(v)).collect())?;
        let (value, grad, breakdown) = self.value_and_grad(&t)?;
        Ok(Evaluation {
            value,
            grad: grad.data().iter().map(|v| v.as_f64()).collect(),
            breakdown,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LbfgsConfig {
    pub max_iter: usize,
    pub memory: usize,
    /// Stop when `|f_k - f_{k+1}| / max(|f_k|, |f_{k+1}|, 1)` falls below this.
    pub tolerance: f64,
    /// Stop when the projected gradient's max-norm falls below this.
    pub grad_tolerance: f64,
    pub c1: f64,
    pub max_backtracks: usize,
    /// Retry an accepted unclipped step at the secant minimizer of the
    /// directional derivative (exact on quadratics).
    pub refine_step: bool,
    pub lower: f64,
    pub upper: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            max_iter: 500,
            memory: 10,
            tolerance: 1e-9,
            grad_tolerance: 1e-10,
            c1: 1e-4,
            max_backtracks: 40,
            refine_step: true,
            lower: PIXEL_MIN,
            upper: PIXEL_MAX,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxIterations,
    RelativeChange,
    Gradient,
    LineSearch,
}

#[derive(Clone, Debug)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    /// Iteration 0 holds the initial objective; then one entry per accepted step.
    pub reports: Vec<OptimizeReport>,
    pub stop: StopReason,
}

impl LbfgsOutcome {
    pub fn objective(&self) -> f64 {
        self.reports.last().expect("initial report").objective
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn all_finite(e: &Evaluation) -> bool {
    e.value.is_finite() && e.grad.iter().all(|g| g.is_finite())
}

/// Rounding noise of an objective value.
fn noise(f: f64) -> f64 {
    4.0 * f64::EPSILON * f.abs()
}

/// Fallback acceptance once the value change is at rounding level: the value
/// rises by at most [`noise`], and the directional derivative along the step
/// shows neither a stall nor an overshoot.
fn approx_wolfe(f0: f64, f1: f64, slope0: f64, slope1: f64, c1: f64) -> bool {
    (f1 - f0).abs() <= noise(f0) && slope1 >= 0.9 * slope0 && slope1 <= (1.0 - 2.0 * c1) * -slope0
}

/// Whether moving coordinate value `x` in direction `d` stays inside the box.
fn is_free(x: f64, d: f64, cfg: &LbfgsConfig) -> bool {
    !((x <= cfg.lower && d < 0.0) || (x >= cfg.upper && d > 0.0))
}

/// Projected steepest descent, scaled by `min(1, 1 / |g|_1)`.
fn steepest(x: &[f64], g: &[f64], cfg: &LbfgsConfig) -> Vec<f64> {
    let l1: f64 = g.iter().map(|v| v.abs()).sum();
    let s = (1.0 / l1).min(1.0);
    x.iter()
        .zip(g)
        .map(|(&xi, &gi)| if is_free(xi, -gi, cfg) { -gi * s } else { 0.0 })
        .collect()
}

/// Backtracking Armijo search on the projected path `P(x + t d)`.
fn backtrack(
    objective: &mut dyn Objective,
    x: &[f64],
    cur: &Evaluation,
    d: &[f64],
    cfg: &LbfgsConfig,
    iter: usize,
) -> Result<Option<(f64, Vec<f64>, Evaluation)>> {
    let g = &cur.grad;
    let mut step = 1.0;
    for _ in 0..=cfg.max_backtracks {
        let trial: Vec<f64> = x
            .iter()
            .zip(d)
            .map(|(xi, di)| (xi + step * di).clamp(cfg.lower, cfg.upper))
            .collect();
        let e = objective.evaluate(&trial)?;
        if !all_finite(&e) {
            return Err(Error::Diverged {
                iteration: iter,
                reason: format!("trial step {step:e}"),
                last_good: x.to_vec(),
            });
        }
        let decrease: f64 = g.iter().zip(trial.iter().zip(x)).map(|(gi, (t, xi))| gi * (t - xi)).sum();
        if decrease < 0.0
            && (e.value <= cur.value + cfg.c1 * decrease
                || approx_wolfe(cur.value, e.value, decrease, dot(&e.grad, d) * step, cfg.c1))
        {
            return Ok(Some((step, trial, e)));
        }
        if decrease == 0.0 {
            return Ok(None);
        }
        // Safeguarded quadratic interpolation along the path.
        let slope = decrease / step;
        let denom = 2.0 * (e.value - cur.value - slope * step);
        let next = if denom > 0.0 { -slope * step * step / denom } else { 0.5 * step };
        step = next.clamp(0.1 * step, 0.5 * step);
    }
    Ok(None)
}

/// Box-constrained L-BFGS: two-loop direction, backtracking Armijo search on
/// the projected trial point, optional secant refinement of the accepted
/// step, projection after every step. Accepted objective values never rise
/// by more than 4 ulp, which happens only once progress is below rounding.
pub fn projected_lbfgs(
    objective: &mut dyn Objective,
    init: &[f64],
    cfg: &LbfgsConfig,
    mut on_iter: impl FnMut(&OptimizeReport),
) -> Result<LbfgsOutcome> {
    if cfg.memory == 0 || cfg.lower > cfg.upper {
        return Err(Error::Config("L-BFGS needs memory >= 1 and lower <= upper".into()));
    }
    let project = |v: f64| v.clamp(cfg.lower, cfg.upper);
    let n = init.len();
    let mut x: Vec<f64> = init.iter().map(|&v| project(v)).collect();
    let start = Instant::now();
    let mut cur = objective.evaluate(&x)?;
    if cur.grad.len() != n {
        return Err(Error::Config(format!("gradient has {} entries for {n} variables", cur.grad.len())));
    }
    if !all_finite(&cur) {
        return Err(Error::Diverged {
            iteration: 0,
            reason: "initial point".into(),
            last_good: x,
        });
    }
    let mut reports = vec![OptimizeReport {
        iter: 0,
        objective: cur.value,
        breakdown: cur.breakdown.clone(),
        ms: start.elapsed().as_secs_f64() * 1e3,
    }];
    on_iter(&reports[0]);
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.memory);
    let mut stop = StopReason::MaxIterations;

    for iter in 1..=cfg.max_iter {
        let t0 = Instant::now();
        let g = &cur.grad;
        let pg_norm = (0..n).filter(|&i| is_free(x[i], -g[i], cfg)).map(|i| g[i].abs()).fold(0.0, f64::max);
        if pg_norm < cfg.grad_tolerance {
            stop = StopReason::Gradient;
            break;
        }

        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        if pairs.is_empty() {
            d = steepest(&x, g, cfg);
        } else {
            let mut alphas = Vec::with_capacity(pairs.len());
            for (s, y, rho) in pairs.iter().rev() {
                let a = rho * dot(s, &d);
                d.iter_mut().zip(y).for_each(|(q, yi)| *q -= a * yi);
                alphas.push(a);
            }
            // Scale from the oldest stored pair, which keeps H0 fixed while
            // the memory fills.
            let (s, y, _) = pairs.front().expect("non-empty");
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|v| *v *= gamma);
            for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
                let b = rho * dot(y, &d);
                d.iter_mut().zip(s).for_each(|(r, si)| *r += (a - b) * si);
            }
            for (i, di) in d.iter_mut().enumerate() {
                if !is_free(x[i], *di, cfg) {
                    *di = 0.0;
                }
            }
            if dot(g, &d) >= 0.0 {
                pairs.clear();
                d = steepest(&x, g, cfg);
            }
        }

        let mut found = backtrack(objective, &x, &cur, &d, cfg, iter)?;
        if found.is_none() && !pairs.is_empty() {
            pairs.clear();
            d = steepest(&x, g, cfg);
            found = backtrack(objective, &x, &cur, &d, cfg, iter)?;
        }
        let Some((step, mut x_new, mut next)) = found else {
            stop = StopReason::LineSearch;
            break;
        };
        let unclipped = x_new.iter().zip(x.iter().zip(&d)).all(|(t, (xi, di))| *t == xi + step * di);
        if cfg.refine_step && unclipped {
            let slope0 = dot(g, &d);
            let slope1 = dot(&next.grad, &d);
            if slope1 - slope0 > 0.0 && slope1.abs() > 1e-12 * slope0.abs() {
                let refined = (step * slope0 / (slope0 - slope1)).clamp(1e-2 * step, 1e2 * step);
                let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| project(xi + refined * di)).collect();
                let e = objective.evaluate(&trial)?;
                let decrease: f64 = g.iter().zip(trial.iter().zip(&x)).map(|(gi, (t, xi))| gi * (t - xi)).sum();
                let slope = dot(&e.grad, &d);
                let better = if (e.value - next.value).abs() <= noise(next.value) {
                    slope.abs() < slope1.abs()
                } else {
                    e.value < next.value
                };
                let sufficient = e.value <= cur.value + cfg.c1 * decrease
                    || approx_wolfe(cur.value, e.value, slope0 * refined, slope * refined, cfg.c1);
                if all_finite(&e) && better && sufficient {
                    x_new = trial;
                    next = e;
                }
            }
        }

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next.grad.iter().zip(&cur.grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * (dot(&s, &s) * dot(&y, &y)).sqrt() {
            if pairs.len() == cfg.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        let rel = (cur.value - next.value).abs() / cur.value.abs().max(next.value.abs()).max(1.0);
        x = x_new;
        cur = next;
        let report = OptimizeReport {
            iter,
            objective: cur.value,
            breakdown: cur.breakdown.clone(),
            ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        on_iter(&report);
        reports.push(report);
        if rel < cfg.tolerance {
            stop = StopReason::RelativeChange;
            break;
        }
    }
    Ok(LbfgsOutcome { x, reports, stop })
}

/// Bias-corrected Adam with optimizer state kept in double precision.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every parameter slice with its gradient.
    pub fn step<T: Element>(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Config(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Config("parameter count changed between Adam steps".into()));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::Config("parameter and gradient sizes differ".into()));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = g[i].as_f64();
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                p[i] = T::lit(p[i].as_f64() - update);
            }
        }
        Ok(())
    }

    /// Updates shared network parameters in place.
    pub fn step_params<T: Element>(&mut self, params: &mut [NamedParam<T>], grads: &[Tensor<T>]) -> Result<()> {
        let mut slices: Vec<&mut [T]> = params
            .iter_mut()
            .map(|p| std::sync::Arc::make_mut(&mut p.value).data_mut())
            .collect();
        let g: Vec<&[T]> = grads.iter().map(|t| t.data()).collect();
        self.step(&mut slices, &g)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
    /// Training `(height, width)`; corpus and style images are resized to it.
    pub image_size: (usize, usize),
    pub transform: TransformConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            iterations: 2000,
            lr: 1e-4,
            seed: 0,
            image_size: (256, 256),
            transform: TransformConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        self.transform.validate()?;
        self.loss.validate()
    }
}

/// Content image with its repaired mask.
#[derive(Clone, Debug)]
pub struct CorpusItem {
    pub name: String,
    pub image: Image,
    pub mask: SemanticMask,
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm")
    )
}

/// Path of the mask belonging to `image`: `name.mask.png` next to `name.png`.
pub fn mask_path_for(image: &Path) -> PathBuf {
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    image.with_file_name(format!("{stem}.mask.png"))
}

/// Reads and repairs a mask file.
pub fn load_mask(path: &Path) -> Result<SemanticMask> {
    let (mask, _) = repair_orphans(&decode_mask(&read_image(path)?)).map_err(|e| match e {
        Error::NoEyeRegion => Error::format(path, "mask has no eye region (iris channel is empty)"),
        other => other,
    })?;
    Ok(mask)
}

/// Loads every image in `dir` (sorted by name) with its `*.mask.png`.
pub fn load_corpus(dir: &Path) -> Result<Vec<CorpusItem>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if p.is_file() && is_image(&p) && !name.contains(".mask.") {
            paths.push(p);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("corpus {} holds no images", dir.display())));
    }
    let unpaired: Vec<String> = paths
        .iter()
        .filter(|p| !mask_path_for(p).is_file())
        .map(|p| format!("{} (no {})", p.display(), mask_path_for(p).display()))
        .collect();
    if !unpaired.is_empty() {
        return Err(Error::Unpaired(unpaired));
    }
    paths
        .iter()
        .map(|p| {
            let mp = mask_path_for(p);
            let image = read_image(p)?;
            let mask = load_mask(&mp)?;
            if (mask.height(), mask.width()) != (image.height(), image.width()) {
                return Err(Error::Resolution {
                    what: format!("mask of {}", p.display()),
                    expected_h: image.height(),
                    expected_w: image.width(),
                    actual_h: mask.height(),
                    actual_w: mask.width(),
                });
            }
            let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            Ok(CorpusItem { name, image, mask })
        })
        .collect()
}

/// Masks of `mask` pooled to every layer that needs them.
pub fn mask_pyramid(mask: &SemanticMask, layers: &[String]) -> Result<LayerMasks<f32>> {
    let refs: Vec<&str> = layers.iter().map(String::as_str).collect();
    downsample_masks(mask, (mask.height(), mask.width()), &refs)
}

/// Builds the image objective for direct optimization.
pub fn image_objective<'a, T: Element>(
    net: &'a LossNet<T>,
    cfg: &LossConfig,
    content: &Image,
    content_mask: &SemanticMask,
    style: &Image,
    style_mask: &SemanticMask,
) -> Result<ImageObjective<'a, T>> {
    let cm = mask_pyramid(content_mask, &cfg.mask_layers())?.cast();
    let sm = mask_pyramid(style_mask, &cfg.style_local)?.cast();
    ImageObjective::new(net, cfg, &content.to_tensor(), &cm, &style.to_tensor(), &sm)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: TransformNet<f32>,
    /// One report per iteration, objective = batch-mean loss before the update.
    pub curve: Vec<OptimizeReport>,
}

/// Adam training of a freshly initialized transform network.
pub fn train_transform(
    corpus: &[CorpusItem],
    style: &Image,
    style_mask: &SemanticMask,
    cfg: &TrainConfig,
    loss_net: &LossNet<f32>,
    mut on_iter: impl FnMut(&OptimizeReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let (h, w) = cfg.image_size;
    let mut net = TransformNet::<f32>::new(cfg.transform, cfg.seed)?;
    net.set_loss_fingerprint(Some(cfg.loss.fingerprint()));
    crate::transform::shape_plan(&cfg.transform, h, w)?;

    let style_img = resize_bilinear(style, h, w);
    let style_m = mask_pyramid(&style_mask.resized(h, w), &cfg.loss.style_local)?;
    let style_target = StyleTarget::new(loss_net, &style_img.to_tensor(), &style_m, &cfg.loss)?;

    let images: Vec<Image> = corpus.iter().map(|c| resize_bilinear(&c.image, h, w)).collect();
    let mut cache: Vec<Option<ContentTarget<f32>>> = vec![None; corpus.len()];
    let mask_layers = cfg.loss.mask_layers();

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = Vec::new();
    let mut adam = Adam::new(cfg.lr);
    let mut curve = Vec::with_capacity(cfg.iterations);

    for iter in 1..=cfg.iterations {
        let t0 = Instant::now();
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..corpus.len()).collect();
                order.shuffle(&mut order_rng);
                order.reverse();
            }
            batch.push(order.pop().expect("refilled"));
        }
        for &i in &batch {
            if cache[i].is_none() {
                let m = mask_pyramid(&corpus[i].mask.resized(h, w), &mask_layers)?;
                cache[i] = Some(ContentTarget::new(loss_net, &images[i].to_tensor(), &[&m], &cfg.loss)?);
            }
        }
        let parts: Vec<&ContentTarget<f32>> = batch.iter().map(|&i| cache[i].as_ref().expect("cached")).collect();
        let content = ContentTarget::concat(&parts)?;
        let imgs: Vec<&Image> = batch.iter().map(|&i| &images[i]).collect();
        let input = Image::stack::<f32>(&imgs)?;

        let tape = Tape::new();
        let x = tape.constant(input);
        let (out, params) = net.forward_train(&tape, x, &mut dropout_rng)?;
        let (per_sample, breakdown) = total_loss(loss_net, out, &content, &style_target, &cfg.loss)?;
        let root = per_sample.sum().scale(1.0 / batch.len() as f32);
        let value = root.item() as f64;
        if !value.is_finite() {
            let names: Vec<&str> = batch.iter().map(|&i| corpus[i].name.as_str()).collect();
            return Err(Error::NonFinite(format!(
                "training loss at iteration {iter} (batch {}): {breakdown:?}",
                names.join(", ")
            )));
        }
        let grads = tape.backward(root)?;
        let g: Vec<Tensor<f32>> = params.iter().map(|&p| grads.get_or_zeros(p)).collect();
        drop(grads);
        drop(params);
        drop(tape);
        if let Some(bad) = g.iter().zip(net.params()).find(|(t, _)| !t.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {} at iteration {iter}", bad.1.name)));
        }
        adam.step_params(net.params_mut(), &g)?;
        let report = OptimizeReport {
            iter,
            objective: value,
            breakdown,
            ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        on_iter(&report);
        curve.push(report);
    }
    Ok(TrainOutcome { net, curve })
}

/// Trailing moving average with the given window.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Loss curve as CSV with header `iter,total,content,style,tv,ms`.
pub fn curve_csv(reports: &[OptimizeReport]) -> String {
    let mut s = String::from("iter,total,content,style,tv,ms\n");
    for r in reports {
        s.push_str(&format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.3}\n",
            r.iter,
            r.objective,
            r.breakdown.content_total(),
            r.breakdown.style_total(),
            r.breakdown.tv,
            r.ms
        ));
    }
    s
}

pub fn write_curve_csv(path: impl AsRef<Path>, reports: &[OptimizeReport]) -> Result<()> {
    write_atomic(path, curve_csv(reports).as_bytes())
}
