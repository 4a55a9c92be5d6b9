//! Global and mask-local content/style losses, total variation and the full
//! objective.
//!
//! Feature maps are `[B, N, h, w]` tensors; every loss returns one value per
//! sample (`[B]`). Masks enter as one `[B, 1, h, w]` (or `[1, 1, h, w]`) tensor
//! per semantic channel.

use std::collections::{BTreeMap, BTreeSet};

use eyepurify_tensor::{Element, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::lossnet::{layer_index, LossNet};
use crate::masks::LayerMasks;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GramNormalization {
    /// `F F^T`, with `1 / (4 N^2 M^2)` applied inside the style loss.
    Raw,
    /// `F F^T / (N M)`, compared by plain squared Frobenius distance.
    ByElements,
}

impl std::str::FromStr for GramNormalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(GramNormalization::Raw),
            "by-elements" => Ok(GramNormalization::ByElements),
            other => Err(Error::Config(format!("unknown gram normalization `{other}` (expected raw or by-elements)"))),
        }
    }
}

impl std::fmt::Display for GramNormalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GramNormalization::Raw => "raw",
            GramNormalization::ByElements => "by-elements",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub content_local: Vec<String>,
    pub content_global: Vec<String>,
    pub style_local: Vec<String>,
    pub style_global: Vec<String>,
    pub alpha: f64,
    pub beta: f64,
    /// Per-layer replacements for `alpha`.
    pub alpha_layers: BTreeMap<String, f64>,
    /// Per-layer replacements for `beta`.
    pub beta_layers: BTreeMap<String, f64>,
    pub lambda_global: f64,
    pub lambda_local: f64,
    pub theta: f64,
    pub gram: GramNormalization,
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            content_local: names(&["conv4_2"]),
            content_global: names(&["conv3_2"]),
            style_local: names(&["conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1"]),
            style_global: names(&["conv1_2", "conv2_2", "conv3_3", "conv4_3", "conv5_3"]),
            alpha: 1e2,
            beta: 1e4,
            alpha_layers: BTreeMap::new(),
            beta_layers: BTreeMap::new(),
            lambda_global: 1.0,
            lambda_local: 1.0,
            theta: 1e-6,
            gram: GramNormalization::Raw,
        }
    }
}

/// Union of layer lists in network order.
fn ordered_union(lists: &[&[String]]) -> Vec<String> {
    let set: BTreeSet<&String> = lists.iter().flat_map(|l| l.iter()).collect();
    let mut out: Vec<String> = set.into_iter().cloned().collect();
    out.sort_by_key(|n| layer_index(n).unwrap_or(usize::MAX));
    out
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (what, list) in [
            ("content_local", &self.content_local),
            ("content_global", &self.content_global),
            ("style_local", &self.style_local),
            ("style_global", &self.style_global),
        ] {
            if list.is_empty() {
                return Err(Error::Config(format!("{what} layer set is empty")));
            }
            for name in list {
                layer_index(name)?;
            }
        }
        let scalars = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda_global", self.lambda_global),
            ("lambda_local", self.lambda_local),
            ("theta", self.theta),
        ];
        let overrides = self.alpha_layers.iter().chain(&self.beta_layers).map(|(k, v)| (k.as_str(), *v));
        for (name, v) in scalars.into_iter().chain(overrides) {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("weight {name} = {v} must be finite and non-negative")));
            }
        }
        for name in self.alpha_layers.keys().chain(self.beta_layers.keys()) {
            layer_index(name)?;
        }
        Ok(())
    }

    pub fn alpha_for(&self, layer: &str) -> f64 {
        self.alpha_layers.get(layer).copied().unwrap_or(self.alpha)
    }

    pub fn beta_for(&self, layer: &str) -> f64 {
        self.beta_layers.get(layer).copied().unwrap_or(self.beta)
    }

    pub fn content_layers(&self) -> Vec<String> {
        ordered_union(&[&self.content_local, &self.content_global])
    }

    pub fn style_layers(&self) -> Vec<String> {
        ordered_union(&[&self.style_local, &self.style_global])
    }

    pub fn all_layers(&self) -> Vec<String> {
        ordered_union(&[&self.content_local, &self.content_global, &self.style_local, &self.style_global])
    }

    /// Layers at which masks of the content image are needed.
    pub fn mask_layers(&self) -> Vec<String> {
        ordered_union(&[&self.content_local, &self.style_local])
    }

    /// Stable text rendering, one `key = value` per line.
    pub fn canonical(&self) -> String {
        let list = |l: &[String]| l.join(",");
        let map = |m: &BTreeMap<String, f64>| {
            m.iter().map(|(k, v)| format!("{k}:{v:e}")).collect::<Vec<_>>().join(",")
        };
        format!(
            "content_local = {}\ncontent_global = {}\nstyle_local = {}\nstyle_global = {}\nalpha = {:e}\nbeta = {:e}\n\
             alpha_layers = {}\nbeta_layers = {}\nlambda_global = {:e}\nlambda_local = {:e}\ntheta = {:e}\ngram = {:?}\n",
            list(&self.content_local),
            list(&self.content_global),
            list(&self.style_local),
            list(&self.style_global),
            self.alpha,
            self.beta,
            map(&self.alpha_layers),
            map(&self.beta_layers),
            self.lambda_global,
            self.lambda_local,
            self.theta,
            self.gram,
        )
    }

    /// 32-bit FNV-1a hash of [`LossConfig::canonical`].
    pub fn fingerprint(&self) -> u32 {
        self.canonical()
            .bytes()
            .fold(0x811c_9dc5u32, |h, b| (h ^ b as u32).wrapping_mul(0x0100_0193))
    }
}

fn plane_size<T: Element>(f: &Var<'_, T>, op: &'static str) -> Result<(usize, usize)> {
    let (_, n, h, w) = f.value().dims4(op)?;
    Ok((n, h * w))
}

fn same_shape<T: Element>(a: &Var<'_, T>, b: &Var<'_, T>, op: &'static str) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa[1..] != sb[1..] || !(sa[0] == sb[0] || sb[0] == 1) {
        return Err(eyepurify_tensor::TensorError::shape(op, &sa, &sb).into());
    }
    Ok(())
}

fn sum_all<'t, T: Element>(terms: impl IntoIterator<Item = Var<'t, T>>) -> Result<Option<Var<'t, T>>> {
    let mut acc: Option<Var<'t, T>> = None;
    for t in terms {
        acc = Some(match acc {
            None => t,
            Some(a) => a.add(t)?,
        });
    }
    Ok(acc)
}

/// `F ⊙ S_c` for every mask channel.
pub fn masked_features<'t, T: Element>(f: Var<'t, T>, masks: &[Var<'t, T>]) -> Result<Vec<Var<'t, T>>> {
    masks.iter().map(|&m| f.mul_mask(m).map_err(Error::from)).collect()
}

/// Gram matrices `[B, N, N]` of `[B, N, h, w]` features.
pub fn gram_matrix<'t, T: Element>(f: Var<'t, T>, norm: GramNormalization) -> Result<Var<'t, T>> {
    let (n, m) = plane_size(&f, "gram_matrix")?;
    let g = f.gram()?;
    Ok(match norm {
        GramNormalization::Raw => g,
        GramNormalization::ByElements => g.scale(T::lit(1.0 / (n * m) as f64)),
    })
}

/// `Σ (F_O - F_I)^2 / (2 N M)` per sample.
pub fn content_loss_global<'t, T: Element>(fo: Var<'t, T>, fi: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape(&fo, &fi, "content_loss_global")?;
    let (n, m) = plane_size(&fo, "content_loss_global")?;
    Ok(fo.sub(fi)?.sum_squares_per_sample().scale(T::lit(1.0 / (2 * n * m) as f64)))
}

/// `Σ_c Σ ((F_O - F_I) ⊙ S_c[I])^2 / (2 N M)` per sample.
pub fn content_loss_local<'t, T: Element>(
    fo: Var<'t, T>,
    fi: Var<'t, T>,
    masks: &[Var<'t, T>],
) -> Result<Var<'t, T>> {
    same_shape(&fo, &fi, "content_loss_local")?;
    let (n, m) = plane_size(&fo, "content_loss_local")?;
    let diff = fo.sub(fi)?;
    let per_channel = masked_features(diff, masks)?
        .into_iter()
        .map(|d| d.sum_squares_per_sample());
    let total = sum_all(per_channel)?.ok_or_else(|| Error::Config("no mask channels".into()))?;
    Ok(total.scale(T::lit(1.0 / (2 * n * m) as f64)))
}

/// Distance between the Grams of `fo` and a precomputed target `[B|1, N, N]`.
fn gram_distance<'t, T: Element>(
    fo: Var<'t, T>,
    target: Var<'t, T>,
    norm: GramNormalization,
) -> Result<Var<'t, T>> {
    let (n, m) = plane_size(&fo, "style_loss")?;
    let ts = target.shape();
    if ts.len() != 3 || ts[1] != n || ts[2] != n {
        return Err(Error::from(eyepurify_tensor::TensorError::shape("style_loss", &[1, n, n], &ts)));
    }
    let d = gram_matrix(fo, norm)?.sub(target)?.sum_squares_per_sample();
    Ok(match norm {
        GramNormalization::Raw => d.scale(T::lit(1.0 / (4.0 * (n * n) as f64 * (m * m) as f64))),
        GramNormalization::ByElements => d,
    })
}

/// Global style loss of `fo` against the style Gram `target`.
pub fn style_loss_global<'t, T: Element>(
    fo: Var<'t, T>,
    target: Var<'t, T>,
    norm: GramNormalization,
) -> Result<Var<'t, T>> {
    gram_distance(fo, target, norm)
}

/// Local style loss: `Σ_c` distance between the Grams of `fo ⊙ S_c[I]` and the
/// per-channel style Grams.
pub fn style_loss_local<'t, T: Element>(
    fo: Var<'t, T>,
    masks: &[Var<'t, T>],
    targets: &[Var<'t, T>],
    norm: GramNormalization,
) -> Result<Var<'t, T>> {
    if masks.len() != targets.len() {
        return Err(Error::Config(format!(
            "content image has {} mask channels but style image has {}",
            masks.len(),
            targets.len()
        )));
    }
    let (n, m) = plane_size(&fo, "style_loss_local")?;
    let mut terms = Vec::with_capacity(masks.len());
    for (fm, &t) in masked_features(fo, masks)?.into_iter().zip(targets) {
        // Normalize by the unmasked size so that all-ones masks reproduce the global loss.
        let d = match norm {
            GramNormalization::Raw => gram_distance(fm, t, norm)?,
            GramNormalization::ByElements => fm
                .gram()?
                .scale(T::lit(1.0 / (n * m) as f64))
                .sub(t)?
                .sum_squares_per_sample(),
        };
        terms.push(d);
    }
    sum_all(terms)?.ok_or_else(|| Error::Config("no mask channels".into()))
}

/// Style Gram target of `[1, N, h, w]` style features, optionally masked by a
/// `[1, 1, h, w]` mask. Normalized per `norm` with the style image's own size.
pub fn style_gram<T: Element>(fs: &Tensor<T>, mask: Option<&Tensor<T>>, norm: GramNormalization) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let mut f = tape.constant(fs.clone());
    if let Some(m) = mask {
        f = f.mul_mask(tape.constant(m.clone()))?;
    }
    let (n, m) = plane_size(&f, "style_gram")?;
    let g = f.gram()?;
    let g = match norm {
        GramNormalization::Raw => g,
        GramNormalization::ByElements => g.scale(T::lit(1.0 / (n * m) as f64)),
    };
    let out = (*g.value()).clone();
    Ok(out)
}

/// Anisotropic squared-difference total variation of `[B, C, H, W]` images,
/// divided by `H * W`.
pub fn tv_loss<'t, T: Element>(image: Var<'t, T>) -> Result<Var<'t, T>> {
    let (_, _, h, w) = image.value().dims4("tv_loss")?;
    if h < 2 || w < 2 {
        return Err(Error::TooSmall { height: h, width: w, min: 2 });
    }
    let dy = image.diff(eyepurify_tensor::Axis::Height)?.sum_squares_per_sample();
    let dx = image.diff(eyepurify_tensor::Axis::Width)?.sum_squares_per_sample();
    Ok(dx.add(dy)?.scale(T::lit(1.0 / (h * w) as f64)))
}

/// Per-channel `[B, 1, h, w]` masks for one layer from a batch of per-image masks.
pub fn stack_layer_masks<T: Element>(batch: &[&LayerMasks<T>], layer: &str) -> Result<Vec<Tensor<T>>> {
    let first = batch.first().ok_or_else(|| Error::Config("empty batch".into()))?.get(layer)?;
    let (c, h, w) = match first.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::Config(format!("layer masks must be [C, h, w], got {s:?}"))),
    };
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let mut data = Vec::with_capacity(batch.len() * h * w);
        for lm in batch {
            let t = lm.get(layer)?;
            if t.shape() != first.shape() {
                return Err(eyepurify_tensor::TensorError::shape("layer masks", first.shape(), t.shape()).into());
            }
            data.extend_from_slice(&t.data()[ch * h * w..(ch + 1) * h * w]);
        }
        out.push(Tensor::new(&[batch.len(), 1, h, w], data)?);
    }
    Ok(out)
}

/// Precomputed style-image Grams.
#[derive(Clone, Debug)]
pub struct StyleTarget<T = f32> {
    global: BTreeMap<String, Tensor<T>>,
    local: BTreeMap<String, Vec<Tensor<T>>>,
}

impl<T: Element> StyleTarget<T> {
    /// Grams of the `[1, 3, H, W]` style image at every configured style layer,
    /// local ones masked by the style image's own masks.
    pub fn new(net: &LossNet<T>, style: &Tensor<T>, masks: &LayerMasks<T>, cfg: &LossConfig) -> Result<Self> {
        let layers = cfg.style_layers();
        let refs: Vec<&str> = layers.iter().map(String::as_str).collect();
        let feats = net.feature_values(style, &refs)?;
        let mut global = BTreeMap::new();
        for l in &cfg.style_global {
            global.insert(l.clone(), style_gram(&feats[l], None, cfg.gram)?);
        }
        let mut local = BTreeMap::new();
        for l in &cfg.style_local {
            let per_channel = stack_layer_masks(&[masks], l)?
                .iter()
                .map(|m| style_gram(&feats[l], Some(m), cfg.gram))
                .collect::<Result<Vec<_>>>()?;
            local.insert(l.clone(), per_channel);
        }
        Ok(StyleTarget { global, local })
    }

    pub fn global(&self, layer: &str) -> Option<&Tensor<T>> {
        self.global.get(layer)
    }

    pub fn local(&self, layer: &str) -> Option<&[Tensor<T>]> {
        self.local.get(layer).map(Vec::as_slice)
    }
}

/// Content-image features at the content layers plus its masks at every
/// layer that needs them.
#[derive(Clone, Debug)]
pub struct ContentTarget<T = f32> {
    batch: usize,
    features: BTreeMap<String, Tensor<T>>,
    masks: BTreeMap<String, Vec<Tensor<T>>>,
}

impl<T: Element> ContentTarget<T> {
    /// Targets for a `[B, 3, H, W]` batch of content images with one set of
    /// layer masks per image.
    pub fn new(net: &LossNet<T>, images: &Tensor<T>, masks: &[&LayerMasks<T>], cfg: &LossConfig) -> Result<Self> {
        let batch = images.dims4("content image")?.0;
        if masks.len() != batch {
            return Err(Error::Config(format!("{batch} content images but {} mask sets", masks.len())));
        }
        let layers = cfg.content_layers();
        let refs: Vec<&str> = layers.iter().map(String::as_str).collect();
        let features = net.feature_values(images, &refs)?;
        let mut by_layer = BTreeMap::new();
        for l in cfg.mask_layers() {
            let stacked = stack_layer_masks(masks, &l)?;
            by_layer.insert(l, stacked);
        }
        Ok(ContentTarget {
            batch,
            features,
            masks: by_layer,
        })
    }

    /// Concatenates single-image (or smaller batch) targets along the batch axis.
    pub fn concat(parts: &[&ContentTarget<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Config("empty batch".into()))?;
        let cat = |tensors: Vec<&Tensor<T>>| -> Result<Tensor<T>> {
            let mut shape = tensors[0].shape().to_vec();
            shape[0] = tensors.iter().map(|t| t.shape()[0]).sum();
            let data = tensors.iter().flat_map(|t| t.data().iter().copied()).collect();
            Ok(Tensor::new(&shape, data)?)
        };
        let mut features = BTreeMap::new();
        for k in first.features.keys() {
            features.insert(k.clone(), cat(parts.iter().map(|p| &p.features[k]).collect())?);
        }
        let mut masks = BTreeMap::new();
        for (k, chans) in &first.masks {
            let per_channel = (0..chans.len())
                .map(|c| cat(parts.iter().map(|p| &p.masks[k][c]).collect()))
                .collect::<Result<Vec<_>>>()?;
            masks.insert(k.clone(), per_channel);
        }
        Ok(ContentTarget {
            batch: parts.iter().map(|p| p.batch).sum(),
            features,
            masks,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn features(&self, layer: &str) -> Option<&Tensor<T>> {
        self.features.get(layer)
    }

    pub fn masks(&self, layer: &str) -> Result<&[Tensor<T>]> {
        self.masks
            .get(layer)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingMask(layer.to_string()))
    }
}

/// Weighted contributions to the objective, averaged over the batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Breakdown {
    /// `α_l · ℓ_feat^l` per content layer.
    pub content: BTreeMap<String, f64>,
    /// `β_l · ℓ_style^l` per style layer.
    pub style: BTreeMap<String, f64>,
    /// `θ · ℓ_TV`.
    pub tv: f64,
}

impl Breakdown {
    pub fn content_total(&self) -> f64 {
        self.content.values().sum()
    }

    pub fn style_total(&self) -> f64 {
        self.style.values().sum()
    }

    pub fn total(&self) -> f64 {
        self.content_total() + self.style_total() + self.tv
    }
}

fn batch_mean<T: Element>(v: &Var<'_, T>) -> f64 {
    let t = v.value();
    t.data().iter().map(|x| x.as_f64()).sum::<f64>() / t.len() as f64
}

/// Per-sample objective `Σ α_l ℓ_feat^l + Σ β_l ℓ_style^l + θ ℓ_TV` of the
/// `[B, 3, H, W]` output `o`, with its batch-averaged breakdown.
pub fn total_loss<'t, T: Element>(
    net: &LossNet<T>,
    o: Var<'t, T>,
    content: &ContentTarget<T>,
    style: &StyleTarget<T>,
    cfg: &LossConfig,
) -> Result<(Var<'t, T>, Breakdown)> {
    let tape = o.tape();
    let batch = o.value().dims4("total_loss")?.0;
    if content.batch != batch && content.batch != 1 {
        return Err(Error::Config(format!(
            "output batch {batch} does not match {} content targets",
            content.batch
        )));
    }
    let layers = cfg.all_layers();
    let refs: Vec<&str> = layers.iter().map(String::as_str).collect();
    let feats = net.features(o, &refs)?;
    let mask_vars = |layer: &str| -> Result<Vec<Var<'t, T>>> {
        Ok(content.masks(layer)?.iter().map(|m| tape.constant(m.clone())).collect())
    };
    let mut terms = Vec::new();
    let mut breakdown = Breakdown::default();

    for l in cfg.content_layers() {
        let fo = feats[&l];
        let target = content
            .features(&l)
            .ok_or_else(|| Error::Config(format!("content target lacks layer {l}")))?;
        let fi = tape.constant(target.clone());
        let mut parts = Vec::new();
        if cfg.content_global.contains(&l) {
            parts.push(content_loss_global(fo, fi)?.scale(T::lit(cfg.lambda_global)));
        }
        if cfg.content_local.contains(&l) {
            parts.push(content_loss_local(fo, fi, &mask_vars(&l)?)?.scale(T::lit(cfg.lambda_local)));
        }
        let term = sum_all(parts)?.expect("layer is in at least one set").scale(T::lit(cfg.alpha_for(&l)));
        breakdown.content.insert(l.clone(), batch_mean(&term));
        terms.push(term);
    }

    for l in cfg.style_layers() {
        let fo = feats[&l];
        let mut parts = Vec::new();
        if cfg.style_global.contains(&l) {
            let g = style.global(&l).ok_or_else(|| Error::Config(format!("style target lacks layer {l}")))?;
            parts.push(style_loss_global(fo, tape.constant(g.clone()), cfg.gram)?.scale(T::lit(cfg.lambda_global)));
        }
        if cfg.style_local.contains(&l) {
            let gs = style.local(&l).ok_or_else(|| Error::MissingMask(l.clone()))?;
            let targets: Vec<Var<'t, T>> = gs.iter().map(|g| tape.constant(g.clone())).collect();
            parts.push(style_loss_local(fo, &mask_vars(&l)?, &targets, cfg.gram)?.scale(T::lit(cfg.lambda_local)));
        }
        let term = sum_all(parts)?.expect("layer is in at least one set").scale(T::lit(cfg.beta_for(&l)));
        breakdown.style.insert(l.clone(), batch_mean(&term));
        terms.push(term);
    }

    let tv = tv_loss(o)?.scale(T::lit(cfg.theta));
    breakdown.tv = batch_mean(&tv);
    terms.push(tv);
    let total = sum_all(terms)?.expect("tv term is always present");
    Ok((total, breakdown))
}

/// The objective over a single output image for fixed content and style
/// images, as used by direct image optimization.
#[derive(Clone, Debug)]
pub struct ImageObjective<'a, T = f32> {
    net: &'a LossNet<T>,
    cfg: LossConfig,
    content: ContentTarget<T>,
    style: StyleTarget<T>,
    shape: Vec<usize>,
}

impl<'a, T: Element> ImageObjective<'a, T> {
    /// `content` and `style` are `[1, 3, H, W]` images with their layer masks.
    pub fn new(
        net: &'a LossNet<T>,
        cfg: &LossConfig,
        content: &Tensor<T>,
        content_masks: &LayerMasks<T>,
        style: &Tensor<T>,
        style_masks: &LayerMasks<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(ImageObjective {
            net,
            cfg: cfg.clone(),
            content: ContentTarget::new(net, content, &[content_masks], cfg)?,
            style: StyleTarget::new(net, style, style_masks, cfg)?,
            shape: content.shape().to_vec(),
        })
    }

    /// Shape of the content image, which the optimized image shares.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn net(&self) -> &LossNet<T> {
        self.net
    }

    pub fn config(&self) -> &LossConfig {
        &self.cfg
    }

    pub fn value(&self, o: &Tensor<T>) -> Result<(f64, Breakdown)> {
        let tape = Tape::new();
        let (total, breakdown) = total_loss(self.net, tape.constant(o.clone()), &self.content, &self.style, &self.cfg)?;
        Ok((total.value().data()[0].as_f64(), breakdown))
    }

    pub fn value_and_grad(&self, o: &Tensor<T>) -> Result<(f64, Tensor<T>, Breakdown)> {
        let tape = Tape::new();
        let x = tape.leaf(o.clone(), true);
        let (total, breakdown) = total_loss(self.net, x, &self.content, &self.style, &self.cfg)?;
        let value = total.value().data()[0].as_f64();
        let mut grads = tape.backward(total.sum())?;
        let g = grads.take(x).expect("input requires grad");
        Ok((value, g, breakdown))
    }
}
