//! Batch normalization and dropout.

use rand::{Rng, RngCore};

use crate::element::{pairwise_sum, pairwise_sum_by, Element};
use crate::error::{Result, TensorError};
use crate::tape::Var;
use crate::tensor::Tensor;

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running mean and variance tracked by train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    populated: bool,
}

impl<T: Element> RunningStats<T> {
    /// Stats initialized to zero mean and unit variance.
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            populated: true,
        }
    }

    /// Placeholder stats that must be filled by training before eval use.
    pub fn unpopulated(channels: usize) -> Self {
        RunningStats {
            populated: false,
            ..Self::new(channels)
        }
    }

    pub fn from_parts(mean: Vec<T>, var: Vec<T>) -> Self {
        RunningStats {
            mean,
            var,
            populated: true,
        }
    }

    pub fn is_populated(&self) -> bool {
        self.populated
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn cast<U: Element>(&self) -> RunningStats<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::lit(x.as_f64())).collect();
        RunningStats {
            mean: conv(&self.mean),
            var: conv(&self.var),
            populated: self.populated,
        }
    }
}

impl<'t, T: Element> Var<'t, T> {
    /// Spatial batch normalization of `[N, C, H, W]` with affine `gamma`/`beta` of shape `[C]`.
    ///
    /// Train mode normalizes with batch statistics (biased variance) and folds
    /// them into `stats` with momentum 0.1 (unbiased variance); eval mode uses `stats`.
    pub fn batch_norm2d(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        mode: Mode,
        stats: &mut RunningStats<T>,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4("batch_norm2d")?;
        for p in [gamma, beta] {
            if p.shape() != [c] {
                return Err(TensorError::shape("batch_norm2d", &[c], &p.shape()));
            }
        }
        if stats.channels() != c {
            return Err(TensorError::shape("batch_norm2d", &[c], &[stats.channels()]));
        }
        let hw = h * w;
        let count = n * hw;
        let eps = T::lit(BATCH_NORM_EPS);
        let gv = gamma.value();
        let bv = beta.value();

        let (mean, var) = match mode {
            Mode::Train => {
                let cnt = T::from_usize(count).expect("count fits");
                let plane = |b: usize, ch: usize| &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                let mean: Vec<T> = (0..c)
                    .map(|ch| {
                        let partial: Vec<T> = (0..n).map(|b| pairwise_sum(plane(b, ch))).collect();
                        pairwise_sum(&partial) / cnt
                    })
                    .collect();
                let var: Vec<T> = (0..c)
                    .map(|ch| {
                        let mu = mean[ch];
                        let partial: Vec<T> = (0..n)
                            .map(|b| pairwise_sum_by(plane(b, ch), |v| (v - mu) * (v - mu)))
                            .collect();
                        pairwise_sum(&partial) / cnt
                    })
                    .collect();
                let m = T::lit(BATCH_NORM_MOMENTUM);
                let unbias = if count > 1 {
                    cnt / (cnt - T::one())
                } else {
                    T::one()
                };
                for ch in 0..c {
                    stats.mean[ch] = (T::one() - m) * stats.mean[ch] + m * mean[ch];
                    stats.var[ch] = (T::one() - m) * stats.var[ch] + m * var[ch] * unbias;
                }
                stats.populated = true;
                (mean, var)
            }
            Mode::Eval => {
                if !stats.is_populated() {
                    return Err(TensorError::invalid(
                        "batch_norm2d",
                        "eval mode requires populated running statistics",
                    ));
                }
                (stats.mean.clone(), stats.var.clone())
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                let (mu, is, ga, be) = (mean[ch], inv_std[ch], gv.data()[ch], bv.data()[ch]);
                for ((xh, o), &v) in xhat.data_mut()[r.clone()]
                    .iter_mut()
                    .zip(&mut out.data_mut()[r.clone()])
                    .zip(&x.data()[r])
                {
                    *xh = (v - mu) * is;
                    *o = ga * *xh + be;
                }
            }
        }

        Ok(self.tape().record(out, &[self, gamma, beta], move |g, needs| {
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                    let gs = &g.data()[r.clone()];
                    let xs = &xhat.data()[r];
                    dbeta[ch] += pairwise_sum(gs);
                    let prod: Vec<T> = gs.iter().zip(xs).map(|(&a, &b)| a * b).collect();
                    dgamma[ch] += pairwise_sum(&prod);
                }
            }
            let gx = needs[0].then(|| {
                let mut gx = Tensor::zeros(g.shape());
                let cnt = T::from_usize(count).expect("count fits");
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                        let ga = gv.data()[ch];
                        let is = inv_std[ch];
                        let dst = &mut gx.data_mut()[r.clone()];
                        let gs = &g.data()[r.clone()];
                        let xs = &xhat.data()[r];
                        match mode {
                            Mode::Train => {
                                // d xhat = g * gamma; sums over the channel are dbeta*gamma and dgamma*gamma.
                                let sum_d = dbeta[ch] * ga;
                                let sum_dx = dgamma[ch] * ga;
                                for ((d, &gg), &xh) in dst.iter_mut().zip(gs).zip(xs) {
                                    *d = is / cnt * (cnt * gg * ga - sum_d - xh * sum_dx);
                                }
                            }
                            Mode::Eval => {
                                for (d, &gg) in dst.iter_mut().zip(gs) {
                                    *d = gg * ga * is;
                                }
                            }
                        }
                    }
                }
                gx
            });
            vec![
                gx,
                needs[1].then(|| Tensor::new(&[c], dgamma).expect("c > 0")),
                needs[2].then(|| Tensor::new(&[c], dbeta).expect("c > 0")),
            ]
        }))
    }

    /// Inverted dropout: in train mode each element is zeroed with probability
    /// `p` and survivors are scaled by `1 / (1 - p)`. Eval mode returns `self`.
    pub fn dropout(self, p: f64, mode: Mode, rng: &mut dyn RngCore) -> Result<Var<'t, T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::invalid("dropout", format!("p = {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(self);
        }
        let x = self.value();
        let keep = T::lit(1.0 / (1.0 - p));
        let mask = Tensor::from_fn(x.shape(), |_| {
            if rng.gen::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        });
        let out = x.zip_map(&mask, |a, m| a * m);
        Ok(self
            .tape()
            .record(out, &[self], move |g, _| vec![Some(g.zip_map(&mask, |a, m| a * m))]))
    }
}
