//! Frozen VGG-19 style feature extractor.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use eyepurify_tensor::{gemm, Element, Layout, Tape, Tensor, Var};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model_io::{ModelFile, ModelKind};

/// Conv layers of VGG-19 as `(name, in_channels, out_channels)`.
pub const VGG19_LAYERS: [(&str, usize, usize); 16] = [
    ("conv1_1", 3, 64),
    ("conv1_2", 64, 64),
    ("conv2_1", 64, 128),
    ("conv2_2", 128, 128),
    ("conv3_1", 128, 256),
    ("conv3_2", 256, 256),
    ("conv3_3", 256, 256),
    ("conv3_4", 256, 256),
    ("conv4_1", 256, 512),
    ("conv4_2", 512, 512),
    ("conv4_3", 512, 512),
    ("conv4_4", 512, 512),
    ("conv5_1", 512, 512),
    ("conv5_2", 512, 512),
    ("conv5_3", 512, 512),
    ("conv5_4", 512, 512),
];

/// Layers followed by 2x2 max pooling.
const POOL_AFTER: [&str; 4] = ["conv1_2", "conv2_2", "conv3_4", "conv4_4"];

/// Per-channel RGB means subtracted from inputs for externally trained weights.
pub const VGG_MEAN_RGB: [f64; 3] = [123.68, 116.779, 103.939];

const ORTHOGONAL_GAIN: f64 = std::f64::consts::SQRT_2;

pub fn layer_index(name: &str) -> Result<usize> {
    VGG19_LAYERS
        .iter()
        .position(|(n, _, _)| *n == name)
        .ok_or_else(|| Error::UnknownLayer(name.to_string()))
}

/// Cumulative spatial stride of the feature map produced by `name`.
pub fn layer_stride(name: &str) -> Result<usize> {
    let idx = layer_index(name)?;
    let pools = VGG19_LAYERS[..idx]
        .iter()
        .filter(|(n, _, _)| POOL_AFTER.contains(n))
        .count();
    Ok(1 << pools)
}

pub fn layer_channels(name: &str) -> Result<usize> {
    Ok(VGG19_LAYERS[layer_index(name)?].2)
}

/// Spatial size of `name`'s features for an `h x w` input.
pub fn feature_size(name: &str, h: usize, w: usize) -> Result<(usize, usize)> {
    let s = layer_stride(name)?;
    let (fh, fw) = (h / s, w / s);
    if fh == 0 || fw == 0 {
        return Err(Error::TooSmall {
            height: h,
            width: w,
            min: s,
        });
    }
    Ok((fh, fw))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightSource {
    Seeded(u64),
    External,
}

#[derive(Clone)]
struct ConvLayer<T> {
    weight: Arc<Tensor<T>>,
    bias: Arc<Tensor<T>>,
}

/// Fixed-topology feature extractor whose weights never receive gradients.
#[derive(Clone)]
pub struct LossNet<T = f32> {
    layers: Vec<ConvLayer<T>>,
    mean_rgb: Option<[f64; 3]>,
    source: WeightSource,
}

impl<T> std::fmt::Debug for LossNet<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LossNet")
            .field("layers", &self.layers.len())
            .field("mean_rgb", &self.mean_rgb)
            .field("source", &self.source)
            .finish()
    }
}

/// `[rows, cols]` matrix with orthonormal rows (or columns when `rows > cols`),
/// via Cholesky-QR of a Gaussian draw.
fn orthogonal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // Work with a tall matrix `a` (tall x short) whose columns get orthonormalized.
    let (tall, short) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let a: Vec<f64> = (0..tall * short).map(|_| StandardNormal.sample(rng)).collect();
    let mut ata = vec![0.0; short * short];
    gemm(short, tall, short, 1.0, &a, Layout::Transposed, &a, Layout::Normal, 0.0, &mut ata);
    let chol = DMatrix::from_row_slice(short, short, &ata)
        .cholesky()
        .expect("Gram matrix of a Gaussian draw is positive definite");
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(short, short))
        .expect("Cholesky factor is invertible");
    let mut l_inv_rows = vec![0.0; short * short];
    for i in 0..short {
        for j in 0..short {
            l_inv_rows[i * short + j] = l_inv[(i, j)];
        }
    }
    // q^T = L^-1 a^T, shape [short, tall], rows orthonormal.
    let mut qt = vec![0.0; short * tall];
    gemm(short, short, tall, 1.0, &l_inv_rows, Layout::Normal, &a, Layout::Transposed, 0.0, &mut qt);
    if rows >= cols {
        let mut q = vec![0.0; tall * short];
        for i in 0..short {
            for j in 0..tall {
                q[j * short + i] = qt[i * tall + j];
            }
        }
        q
    } else {
        qt
    }
}

impl LossNet<f32> {
    /// Orthogonally initialized weights (gain sqrt 2) and zero biases drawn from `seed`.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = VGG19_LAYERS
            .iter()
            .map(|&(_, cin, cout)| {
                let fan_in = cin * 9;
                let q = orthogonal(cout, fan_in, &mut rng);
                let weight = Tensor::new(
                    &[cout, cin, 3, 3],
                    q.iter().map(|&v| (ORTHOGONAL_GAIN * v) as f32).collect(),
                )
                .expect("orthogonal matrix has cout * fan_in entries");
                ConvLayer {
                    weight: Arc::new(weight),
                    bias: Arc::new(Tensor::zeros(&[cout])),
                }
            })
            .collect();
        LossNet {
            layers,
            mean_rgb: None,
            source: WeightSource::Seeded(seed),
        }
    }

    /// Weights from a loss-network model file; inputs are mean-centred.
    pub fn from_model_file(file: &ModelFile) -> Result<Self> {
        if file.kind != ModelKind::LossNet {
            return Err(Error::Topology(format!(
                "expected a loss network file, found a {}",
                file.kind.name()
            )));
        }
        let expected: Vec<(String, Vec<usize>)> = VGG19_LAYERS
            .iter()
            .flat_map(|&(name, cin, cout)| {
                [
                    (format!("{name}.weight"), vec![cout, cin, 3, 3]),
                    (format!("{name}.bias"), vec![cout]),
                ]
            })
            .collect();
        for (i, (name, shape)) in expected.iter().enumerate() {
            let layer = name.split('.').next().expect("non-empty");
            match file.entries.get(i) {
                None => {
                    return Err(Error::Topology(format!("layer {layer}: missing from file (entry `{name}`)")))
                }
                Some(e) if &e.name != name || e.tensor.shape() != shape.as_slice() => {
                    return Err(Error::Topology(format!(
                        "layer {layer}: expected `{name}` {shape:?}, found `{}` {:?}",
                        e.name,
                        e.tensor.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = file.entries.get(expected.len()) {
            return Err(Error::Topology(format!("unexpected entry `{}` after conv5_4", extra.name)));
        }
        let layers = file
            .entries
            .chunks(2)
            .map(|pair| ConvLayer {
                weight: Arc::new(pair[0].tensor.clone()),
                bias: Arc::new(pair[1].tensor.clone()),
            })
            .collect();
        Ok(LossNet {
            layers,
            mean_rgb: Some(VGG_MEAN_RGB),
            source: WeightSource::External,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_model_file(&ModelFile::load(path)?)
    }
}

impl<T: Element> LossNet<T> {
    pub fn to_model_file(&self) -> ModelFile {
        let mut file = ModelFile::new(ModelKind::LossNet);
        for ((name, _, _), layer) in VGG19_LAYERS.iter().zip(&self.layers) {
            file.push(format!("{name}.weight"), &layer.weight);
            file.push(format!("{name}.bias"), &layer.bias);
        }
        file
    }

    pub fn cast<U: Element>(&self) -> LossNet<U> {
        LossNet {
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    weight: Arc::new(l.weight.cast()),
                    bias: Arc::new(l.bias.cast()),
                })
                .collect(),
            mean_rgb: self.mean_rgb,
            source: self.source,
        }
    }

    pub fn source(&self) -> WeightSource {
        self.source
    }

    pub fn mean_rgb(&self) -> Option<[f64; 3]> {
        self.mean_rgb
    }

    pub fn weight(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.layers[layer_index(name)?].weight)
    }

    /// Post-ReLU activations of `image` (`[B, 3, H, W]`, pixel units) at each
    /// requested layer. The forward pass stops at the deepest one.
    pub fn features<'t>(&self, image: Var<'t, T>, layers: &[&str]) -> Result<BTreeMap<String, Var<'t, T>>> {
        let mut wanted = vec![false; VGG19_LAYERS.len()];
        for name in layers {
            wanted[layer_index(name)?] = true;
        }
        let Some(last) = wanted.iter().rposition(|&w| w) else {
            return Ok(BTreeMap::new());
        };
        let (_, _, h, w) = image.value().dims4("loss network input")?;
        feature_size(VGG19_LAYERS[last].0, h, w)?;
        let tape = image.tape();
        let mut x = match self.mean_rgb {
            Some(mean) => image.shift_channels(&mean.map(|m| T::lit(-m)))?,
            None => image,
        };
        let mut out = BTreeMap::new();
        for (i, ((name, _, _), layer)) in VGG19_LAYERS.iter().zip(&self.layers).enumerate().take(last + 1) {
            let weight = tape.leaf_shared(Arc::clone(&layer.weight), false);
            let bias = tape.leaf_shared(Arc::clone(&layer.bias), false);
            x = x.conv2d(weight, Some(bias), 1, 1)?.relu();
            if wanted[i] {
                out.insert(name.to_string(), x);
            }
            if i < last && POOL_AFTER.contains(name) {
                x = x.max_pool2d()?;
            }
        }
        Ok(out)
    }

    /// Feature values without recording gradients.
    pub fn feature_values(&self, image: &Tensor<T>, layers: &[&str]) -> Result<BTreeMap<String, Tensor<T>>> {
        let tape = Tape::new();
        let x = tape.constant(image.clone());
        Ok(self
            .features(x, layers)?
            .into_iter()
            .map(|(k, v)| (k, (*v.value()).clone()))
            .collect())
    }
}
