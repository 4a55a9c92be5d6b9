//! Feed-forward transform network: encoder, residual body, decoder and a
//! scaled-tanh output in `[0, 255]`.

use std::sync::Arc;

use eyepurify_tensor::{conv_output_size, conv_transpose_output_size, Element, Mode, RunningStats, Tape, Tensor, Var};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model_io::{ModelFile, ModelKind};

pub const MIN_INPUT: usize = 32;
/// Reflection padding applied to the input by the table-faithful preset.
pub const TABLE_PAD: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Pad-1 residual convolutions; output size equals input size.
    ShapePreserving,
    /// Reflection-padded input, pad-0 residual convolutions and cropped skips.
    TableFaithful,
}

impl Preset {
    pub fn kind(self) -> ModelKind {
        match self {
            Preset::ShapePreserving => ModelKind::ShapePreserving,
            Preset::TableFaithful => ModelKind::TableFaithful,
        }
    }

    pub fn from_kind(kind: ModelKind) -> Result<Self> {
        match kind {
            ModelKind::ShapePreserving => Ok(Preset::ShapePreserving),
            ModelKind::TableFaithful => Ok(Preset::TableFaithful),
            other => Err(Error::Topology(format!("expected a transform network file, found a {}", other.name()))),
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shape-preserving" => Ok(Preset::ShapePreserving),
            "table-faithful" => Ok(Preset::TableFaithful),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected shape-preserving or table-faithful)"
            ))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::ShapePreserving => "shape-preserving",
            Preset::TableFaithful => "table-faithful",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformConfig {
    pub preset: Preset,
    /// Filters of the first convolution; the encoder doubles it twice.
    pub base_width: usize,
    pub residual_blocks: usize,
    pub dropout: f64,
}

impl TransformConfig {
    pub fn new(preset: Preset) -> Self {
        TransformConfig {
            preset,
            base_width: 32,
            residual_blocks: 4,
            dropout: 0.1,
        }
    }

    /// Two residual blocks, eight base filters, no dropout.
    pub fn tiny(preset: Preset) -> Self {
        TransformConfig {
            preset,
            base_width: 8,
            residual_blocks: 2,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.residual_blocks == 0 {
            return Err(Error::Config("base width and residual block count must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

impl Default for TransformConfig {
    fn default() -> Self {
        TransformConfig::new(Preset::ShapePreserving)
    }
}

/// Activation shape `(channels, height, width)` after each stage.
pub type ShapePlan = Vec<(String, [usize; 3])>;

fn too_small(h: usize, w: usize) -> Error {
    Error::TooSmall {
        height: h,
        width: w,
        min: MIN_INPUT,
    }
}

/// Shapes through the network for an `h × w` input.
pub fn shape_plan(cfg: &TransformConfig, h: usize, w: usize) -> Result<ShapePlan> {
    cfg.validate()?;
    if h < MIN_INPUT || w < MIN_INPUT {
        return Err(too_small(h, w));
    }
    let b = cfg.base_width;
    let conv = |(y, x): (usize, usize), k, s, p| -> Result<(usize, usize)> {
        match (conv_output_size(y, k, s, p), conv_output_size(x, k, s, p)) {
            (Some(a), Some(c)) if a > 0 && c > 0 => Ok((a, c)),
            _ => Err(too_small(h, w)),
        }
    };
    let deconv = |(y, x): (usize, usize)| -> Result<(usize, usize)> {
        match (conv_transpose_output_size(y, 4, 2, 1), conv_transpose_output_size(x, 4, 2, 1)) {
            (Some(a), Some(c)) => Ok((a, c)),
            _ => Err(too_small(h, w)),
        }
    };
    let mut plan = Vec::new();
    let mut size = (h, w);
    if cfg.preset == Preset::TableFaithful {
        size = (h + 2 * TABLE_PAD, w + 2 * TABLE_PAD);
        plan.push(("reflection_pad".to_string(), [3, size.0, size.1]));
    }
    let s1 = conv(size, 9, 1, 4)?;
    plan.push(("conv1".into(), [b, s1.0, s1.1]));
    let s2 = conv(s1, 3, 2, 1)?;
    plan.push(("conv2".into(), [2 * b, s2.0, s2.1]));
    let s3 = conv(s2, 3, 2, 1)?;
    plan.push(("conv3".into(), [4 * b, s3.0, s3.1]));
    size = s3;
    for i in 0..cfg.residual_blocks {
        if cfg.preset == Preset::TableFaithful {
            size = conv(conv(size, 3, 1, 0)?, 3, 1, 0)?;
        }
        plan.push((format!("res{}", i + 1), [4 * b, size.0, size.1]));
    }
    let mut d1 = deconv(size)?;
    let mut d2;
    if cfg.preset == Preset::ShapePreserving {
        d1 = (d1.0.min(s2.0), d1.1.min(s2.1));
        d2 = deconv(d1)?;
        d2 = (d2.0.min(s1.0), d2.1.min(s1.1));
    } else {
        d2 = deconv(d1)?;
    }
    plan.push(("deconv1".into(), [2 * b, d1.0, d1.1]));
    plan.push(("deconv2".into(), [b, d2.0, d2.1]));
    let out = conv(d2, 9, 1, 4)?;
    plan.push(("output".into(), [3, out.0, out.1]));
    Ok(plan)
}

#[derive(Clone, Debug)]
pub struct NamedParam<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct TransformNet<T = f32> {
    config: TransformConfig,
    params: Vec<NamedParam<T>>,
    /// Running statistics for each batch norm, in forward order.
    stats: Vec<(String, RunningStats<T>)>,
    loss_fingerprint: Option<u32>,
}

struct Builder<'r, T> {
    rng: &'r mut ChaCha8Rng,
    params: Vec<NamedParam<T>>,
    stats: Vec<(String, RunningStats<T>)>,
}

impl<T: Element> Builder<'_, T> {
    fn push(&mut self, name: String, t: Tensor<T>) {
        self.params.push(NamedParam {
            name,
            value: Arc::new(t),
        });
    }

    fn conv(&mut self, name: &str, shape: [usize; 4], fan_in: usize) {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let rng = &mut *self.rng;
        let w = Tensor::from_fn(&shape, |_| T::lit(normal.sample(rng)));
        self.push(format!("{name}.weight"), w);
        let out = if name.starts_with("deconv") { shape[1] } else { shape[0] };
        self.push(format!("{name}.bias"), Tensor::zeros(&[out]));
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.gamma"), Tensor::ones(&[c]));
        self.push(format!("{name}.beta"), Tensor::zeros(&[c]));
        self.stats.push((name.to_string(), RunningStats::new(c)));
    }
}

/// Consumes bound parameters and running stats in construction order.
struct Cursor<'a, 't, T: Element> {
    params: &'a [Var<'t, T>],
    stats: &'a mut [(String, RunningStats<T>)],
    next_param: usize,
    next_stat: usize,
    mode: Mode,
}

impl<'t, T: Element> Cursor<'_, 't, T> {
    fn take(&mut self) -> Var<'t, T> {
        let v = self.params[self.next_param];
        self.next_param += 1;
        v
    }

    fn conv(&mut self, x: Var<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        let (w, b) = (self.take(), self.take());
        Ok(x.conv2d(w, Some(b), stride, pad)?)
    }

    fn deconv(&mut self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (w, b) = (self.take(), self.take());
        Ok(x.conv_transpose2d(w, Some(b), 2, 1)?)
    }

    fn bn(&mut self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (g, b) = (self.take(), self.take());
        let stats = &mut self.stats[self.next_stat].1;
        self.next_stat += 1;
        Ok(x.batch_norm2d(g, b, self.mode, stats)?)
    }
}

fn crop_to<'t, T: Element>(x: Var<'t, T>, h: usize, w: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s[2] == h && s[3] == w {
        return Ok(x);
    }
    Ok(x.crop2d(0, 0, h, w)?)
}

impl<T: Element> TransformNet<T> {
    /// He fan-in normal weights, zero biases, unit batch-norm scales.
    pub fn new(config: TransformConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let b = config.base_width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bld = Builder {
            rng: &mut rng,
            params: Vec::new(),
            stats: Vec::new(),
        };
        bld.conv("conv1", [b, 3, 9, 9], 3 * 81);
        bld.bn("bn1", b);
        bld.conv("conv2", [2 * b, b, 3, 3], b * 9);
        bld.bn("bn2", 2 * b);
        bld.conv("conv3", [4 * b, 2 * b, 3, 3], 2 * b * 9);
        bld.bn("bn3", 4 * b);
        let c = 4 * b;
        for i in 1..=config.residual_blocks {
            bld.conv(&format!("res{i}.conv1"), [c, c, 3, 3], c * 9);
            bld.bn(&format!("res{i}.bn1"), c);
            bld.conv(&format!("res{i}.conv2"), [c, c, 3, 3], c * 9);
            bld.bn(&format!("res{i}.bn2"), c);
        }
        bld.conv("deconv1", [4 * b, 2 * b, 4, 4], 4 * b * 16);
        bld.bn("bn4", 2 * b);
        bld.conv("deconv2", [2 * b, b, 4, 4], 2 * b * 16);
        bld.bn("bn5", b);
        bld.conv("output", [3, b, 9, 9], b * 81);
        let (params, stats) = (bld.params, bld.stats);
        Ok(TransformNet {
            config,
            params,
            stats,
            loss_fingerprint: None,
        })
    }

    pub fn config(&self) -> &TransformConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedParam<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam<T>] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[(String, RunningStats<T>)] {
        &self.stats
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn loss_fingerprint(&self) -> Option<u32> {
        self.loss_fingerprint
    }

    pub fn set_loss_fingerprint(&mut self, fp: Option<u32>) {
        self.loss_fingerprint = fp;
    }

    /// Parameters as tape leaves, shared rather than copied.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, requires_grad: bool) -> Vec<Var<'t, T>> {
        self.params
            .iter()
            .map(|p| tape.leaf_shared(Arc::clone(&p.value), requires_grad))
            .collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Config(format!("transform input must be [B, 3, H, W], got {shape:?}")));
        }
        shape_plan(&self.config, shape[2], shape[3]).map(|_| ())
    }

    /// Forward pass with explicitly bound parameters (from [`TransformNet::bind`]
    /// or any same-shaped substitutes) and the given running statistics.
    pub fn forward_with<'t>(
        &self,
        params: &[Var<'t, T>],
        stats: &mut [(String, RunningStats<T>)],
        x: Var<'t, T>,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Var<'t, T>> {
        if params.len() != self.params.len() || stats.len() != self.stats.len() {
            return Err(Error::Topology("parameter list does not match the network".into()));
        }
        let in_shape = x.shape();
        self.check_input(&in_shape)?;
        let tf = self.config.preset == Preset::TableFaithful;
        let mut cur = Cursor {
            params,
            stats,
            next_param: 0,
            next_stat: 0,
            mode,
        };
        let x = if tf { x.reflection_pad2d(TABLE_PAD)? } else { x };
        let e1 = cur.conv(x, 1, 4)?;
        let e1 = cur.bn(e1)?.relu();
        let e2 = cur.conv(e1, 2, 1)?;
        let e2 = cur.bn(e2)?.relu();
        let e3 = cur.conv(e2, 2, 1)?;
        let mut h = cur.bn(e3)?.relu();
        let pad = if tf { 0 } else { 1 };
        for _ in 0..self.config.residual_blocks {
            let identity = h;
            let y = cur.conv(h, 1, pad)?;
            let y = y.dropout(self.config.dropout, mode, rng)?;
            let y = cur.bn(y)?.relu();
            let y = cur.conv(y, 1, pad)?;
            let y = cur.bn(y)?;
            let identity = if tf { identity.center_crop(2)? } else { identity };
            h = y.add(identity)?;
        }
        let mut d1 = cur.deconv(h)?;
        if !tf {
            let s = e2.shape();
            d1 = crop_to(d1, s[2], s[3])?;
        }
        let d1 = cur.bn(d1)?.relu();
        let mut d2 = cur.deconv(d1)?;
        if !tf {
            let s = e1.shape();
            d2 = crop_to(d2, s[2], s[3])?;
        }
        let d2 = cur.bn(d2)?.relu();
        let out = cur.conv(d2, 1, 4)?;
        Ok(out.scaled_tanh())
    }

    /// Train-mode forward: batch statistics, dropout and running-stat updates.
    /// Returns the output and the bound parameter leaves.
    pub fn forward_train<'t>(
        &mut self,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
        rng: &mut dyn RngCore,
    ) -> Result<(Var<'t, T>, Vec<Var<'t, T>>)> {
        let params = self.bind(tape, true);
        let mut stats = self.stats.clone();
        let out = self.forward_with(&params, &mut stats, x, Mode::Train, rng)?;
        self.stats = stats;
        Ok((out, params))
    }

    /// Eval-mode forward of a `[B, 3, H, W]` batch of raw pixel values.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let mut stats = self.stats.clone();
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let out = self.forward_with(&params, &mut stats, tape.constant(image.clone()), Mode::Eval, &mut rng)?;
        let value = (*out.value()).clone();
        Ok(value)
    }

    pub fn cast<U: Element>(&self) -> TransformNet<U> {
        TransformNet {
            config: self.config,
            params: self
                .params
                .iter()
                .map(|p| NamedParam {
                    name: p.name.clone(),
                    value: Arc::new(p.value.cast()),
                })
                .collect(),
            stats: self.stats.iter().map(|(n, s)| (n.clone(), s.cast())).collect(),
            loss_fingerprint: self.loss_fingerprint,
        }
    }

    pub fn to_model_file(&self) -> ModelFile {
        let mut f = ModelFile::new(self.config.preset.kind());
        let meta = [
            self.config.base_width as f64,
            self.config.residual_blocks as f64,
            self.config.dropout,
        ];
        f.push("meta.config", &Tensor::from_fn(&[3], |i| meta[i]));
        if let Some(fp) = self.loss_fingerprint {
            let halves = [(fp >> 16) as f32, (fp & 0xffff) as f32];
            f.push("meta.loss_fingerprint", &Tensor::from_fn(&[2], |i| halves[i]));
        }
        for p in &self.params {
            f.push(p.name.clone(), &p.value);
        }
        for (name, s) in &self.stats {
            let c = s.channels();
            f.push(format!("{name}.running_mean"), &Tensor::new(&[c], s.mean.clone()).expect("c entries"));
            f.push(format!("{name}.running_var"), &Tensor::new(&[c], s.var.clone()).expect("c entries"));
        }
        f
    }

    pub fn from_model_file(file: &ModelFile) -> Result<Self> {
        let preset = Preset::from_kind(file.kind)?;
        let meta = file
            .get("meta.config")
            .filter(|t| t.shape() == [3])
            .ok_or_else(|| Error::Topology("transform model lacks a meta.config entry".into()))?;
        let m = meta.data();
        let config = TransformConfig {
            preset,
            base_width: m[0] as usize,
            residual_blocks: m[1] as usize,
            dropout: (m[2] as f64 * 1e6).round() / 1e6,
        };
        let mut net = TransformNet::<T>::new(config, 0)
            .map_err(|e| Error::Topology(format!("invalid stored configuration: {e}")))?;
        let mut used = 1;
        net.loss_fingerprint = match file.get("meta.loss_fingerprint") {
            Some(t) if t.shape() == [2] => {
                used += 1;
                Some(((t.data()[0] as u32) << 16) | (t.data()[1] as u32))
            }
            Some(_) => return Err(Error::Topology("malformed meta.loss_fingerprint".into())),
            None => None,
        };
        let fetch = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
            match file.get(name) {
                Some(t) if t.shape() == shape => Ok(t.cast()),
                Some(t) => Err(Error::Topology(format!(
                    "entry {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                ))),
                None => Err(Error::Topology(format!("missing entry {name}"))),
            }
        };
        for p in &mut net.params {
            p.value = Arc::new(fetch(&p.name, p.value.shape())?);
            used += 1;
        }
        for (name, s) in &mut net.stats {
            let c = s.channels();
            let mean = fetch(&format!("{name}.running_mean"), &[c])?.into_data();
            let var = fetch(&format!("{name}.running_var"), &[c])?.into_data();
            *s = RunningStats::from_parts(mean, var);
            used += 2;
        }
        if used != file.entries.len() {
            return Err(Error::Topology(format!(
                "file holds {} entries but the network uses {used}",
                file.entries.len()
            )));
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_model_file().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_model_file(&ModelFile::load(path)?)
    }
}
