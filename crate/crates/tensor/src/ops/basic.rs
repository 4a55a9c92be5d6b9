//! Elementwise arithmetic, activations, reductions and the Gram product.

use crate::element::{gemm, pairwise_sum, pairwise_sum_by, Element, Layout};
use crate::error::{Result, TensorError};
use crate::tape::Var;
use crate::tensor::Tensor;

/// How `b` lines up with `a` in a binary op.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `b` has leading extent 1 and is repeated along `a`'s leading axis.
    Leading { repeats: usize, block: usize },
}

fn leading_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    if a.len() == b.len() && !a.is_empty() && b[0] == 1 && a[1..] == b[1..] {
        return Ok(Broadcast::Leading {
            repeats: a[0],
            block: b[1..].iter().product(),
        });
    }
    Err(TensorError::shape(op, a, b))
}

fn reduce_leading<T: Element>(g: &Tensor<T>, shape: &[usize], bc: Broadcast) -> Tensor<T> {
    match bc {
        Broadcast::Same => g.clone(),
        Broadcast::Leading { repeats, block } => {
            let mut out = Tensor::zeros(shape);
            let o = out.data_mut();
            for r in 0..repeats {
                for (acc, &v) in o.iter_mut().zip(&g.data()[r * block..(r + 1) * block]) {
                    *acc += v;
                }
            }
            out
        }
    }
}

fn binary<T: Element>(a: &Tensor<T>, b: &Tensor<T>, bc: Broadcast, f: impl Fn(T, T) -> T) -> Tensor<T> {
    match bc {
        Broadcast::Same => a.zip_map(b, f),
        Broadcast::Leading { block, .. } => {
            let data = a
                .data()
                .chunks(block)
                .flat_map(|chunk| chunk.iter().zip(b.data()).map(|(&x, &y)| f(x, y)))
                .collect();
            Tensor::new(a.shape(), data).expect("same shape")
        }
    }
}

impl<'t, T: Element> Var<'t, T> {
    /// `self + other`; `other` may have leading extent 1.
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.add_or_sub(other, T::one(), "add")
    }

    /// `self - other`; `other` may have leading extent 1.
    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.add_or_sub(other, -T::one(), "sub")
    }

    fn add_or_sub(self, other: Var<'t, T>, sign: T, op: &'static str) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let bc = leading_broadcast(op, a.shape(), b.shape())?;
        let out = binary(&a, &b, bc, |x, y| x + sign * y);
        let b_shape = b.shape().to_vec();
        Ok(self.tape().record(out, &[self, other], move |g, needs| {
            let ga = needs[0].then(|| g.clone());
            let gb = needs[1].then(|| {
                let r = reduce_leading(g, &b_shape, bc);
                if sign < T::zero() {
                    r.map(|v| -v)
                } else {
                    r
                }
            });
            vec![ga, gb]
        }))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(TensorError::shape("mul", a.shape(), b.shape()));
        }
        let out = a.zip_map(&b, |x, y| x * y);
        Ok(self.tape().record(out, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |g, y| g * y)),
                needs[1].then(|| g.zip_map(&a, |g, x| g * x)),
            ]
        }))
    }

    /// Multiplies every channel of `[B, C, H, W]` by a single-channel mask of
    /// shape `[B, 1, H, W]` or `[1, 1, H, W]`.
    pub fn mul_mask(self, mask: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.value();
        let m = mask.value();
        let (n, c, h, w) = x.dims4("mul_mask")?;
        let ms = m.shape();
        if ms.len() != 4 || ms[1] != 1 || ms[2] != h || ms[3] != w || !(ms[0] == n || ms[0] == 1) {
            return Err(TensorError::shape("mul_mask", &[n, 1, h, w], ms));
        }
        let hw = h * w;
        let mask_batch = ms[0];
        let plane = move |b: usize| if mask_batch == 1 { 0 } else { b * hw };
        let mut out = Tensor::zeros(x.shape());
        for b in 0..n {
            let mp = &m.data()[plane(b)..plane(b) + hw];
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for ((o, &v), &s) in out.data_mut()[base..base + hw]
                    .iter_mut()
                    .zip(&x.data()[base..base + hw])
                    .zip(mp)
                {
                    *o = v * s;
                }
            }
        }
        let m_shape = ms.to_vec();
        Ok(self.tape().record(out, &[self, mask], move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = Tensor::zeros(g.shape());
                for b in 0..n {
                    let mp = &m.data()[plane(b)..plane(b) + hw];
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for ((o, &gv), &s) in gx.data_mut()[base..base + hw]
                            .iter_mut()
                            .zip(&g.data()[base..base + hw])
                            .zip(mp)
                        {
                            *o = gv * s;
                        }
                    }
                }
                gx
            });
            let gm = needs[1].then(|| {
                let mut gm = Tensor::zeros(&m_shape);
                for b in 0..n {
                    let p = plane(b);
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in 0..hw {
                            gm.data_mut()[p + i] += g.data()[base + i] * x.data()[base + i];
                        }
                    }
                }
                gm
            });
            vec![gx, gm]
        }))
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        let out = self.value().map(|v| v * s);
        self.tape()
            .record(out, &[self], move |g, _| vec![Some(g.map(|v| v * s))])
    }

    /// Adds a per-channel constant to `[B, C, H, W]`.
    pub fn shift_channels(self, offsets: &[T]) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4("shift_channels")?;
        if offsets.len() != c {
            return Err(TensorError::shape("shift_channels", &[c], &[offsets.len()]));
        }
        let hw = h * w;
        let mut out = (*x).clone();
        for b in 0..n {
            for (ch, &off) in offsets.iter().enumerate() {
                let base = (b * c + ch) * hw;
                for v in &mut out.data_mut()[base..base + hw] {
                    *v += off;
                }
            }
        }
        Ok(self.tape().record(out, &[self], |g, _| vec![Some(g.clone())]))
    }

    pub fn square(self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| v * v);
        let two = T::lit(2.0);
        self.tape().record(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |g, x| two * g * x))]
        })
    }

    pub fn relu(self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| v.max(T::zero()));
        self.tape().record(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |g, x| if x > T::zero() { g } else { T::zero() }))]
        })
    }

    pub fn tanh(self) -> Var<'t, T> {
        let y = std::sync::Arc::new(self.value().map(|v| v.tanh()));
        let saved = y.clone();
        self.tape().record((*y).clone(), &[self], move |g, _| {
            vec![Some(g.zip_map(&saved, |g, t| g * (T::one() - t * t)))]
        })
    }

    /// `127.5 * (tanh(x) + 1)`, mapping the real line onto the pixel range (0, 255).
    pub fn scaled_tanh(self) -> Var<'t, T> {
        let half = T::lit(127.5);
        let t = self.value().map(|v| v.tanh());
        let out = t.map(|v| half * (v + T::one()));
        self.tape().record(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&t, |g, t| g * half * (T::one() - t * t)))]
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = (*x).clone().reshape(shape)?;
        let original = x.shape().to_vec();
        Ok(self.tape().record(out, &[self], move |g, _| {
            vec![Some(g.clone().reshape(&original).expect("same length"))]
        }))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape().record(Tensor::scalar(x.sum()), &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().len();
        self.sum().scale(T::one() / T::from_usize(n).expect("len fits"))
    }

    /// Sum of all elements of each leading-axis slice, giving shape `[B]`.
    pub fn sum_per_sample(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let b = shape[0];
        let block = x.len() / b;
        let sums: Vec<T> = x.data().chunks(block).map(pairwise_sum).collect();
        let out = Tensor::new(&[b], sums).expect("b > 0");
        self.tape().record(out, &[self], move |g, _| {
            let data = g
                .data()
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v, block))
                .collect();
            vec![Some(Tensor::new(&shape, data).expect("same length"))]
        })
    }

    /// Sum of squares of each leading-axis slice, giving shape `[B]`.
    pub fn sum_squares_per_sample(self) -> Var<'t, T> {
        let x = self.value();
        let b = x.shape()[0];
        let block = x.len() / b;
        let sums: Vec<T> = x
            .data()
            .chunks(block)
            .map(|c| pairwise_sum_by(c, |v| v * v))
            .collect();
        let out = Tensor::new(&[b], sums).expect("b > 0");
        let two = T::lit(2.0);
        self.tape().record(out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(x.shape());
            for (bi, (dst, src)) in gx
                .data_mut()
                .chunks_mut(block)
                .zip(x.data().chunks(block))
                .enumerate()
            {
                let s = two * g.data()[bi];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = s * v;
                }
            }
            vec![Some(gx)]
        })
    }

    /// Raw Gram matrices `F F^T` of `[B, C, H, W]` features, shape `[B, C, C]`.
    pub fn gram(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4("gram")?;
        let m = h * w;
        let mut out = Tensor::zeros(&[n, c, c]);
        for b in 0..n {
            let f = &x.data()[b * c * m..(b + 1) * c * m];
            gemm(
                c,
                m,
                c,
                T::one(),
                f,
                Layout::Normal,
                f,
                Layout::Transposed,
                T::zero(),
                &mut out.data_mut()[b * c * c..(b + 1) * c * c],
            );
        }
        Ok(self.tape().record(out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(x.shape());
            let mut sym = vec![T::zero(); c * c];
            for b in 0..n {
                let gb = &g.data()[b * c * c..(b + 1) * c * c];
                for i in 0..c {
                    for j in 0..c {
                        sym[i * c + j] = gb[i * c + j] + gb[j * c + i];
                    }
                }
                let f = &x.data()[b * c * m..(b + 1) * c * m];
                gemm(
                    c,
                    c,
                    m,
                    T::one(),
                    &sym,
                    Layout::Normal,
                    f,
                    Layout::Normal,
                    T::zero(),
                    &mut gx.data_mut()[b * c * m..(b + 1) * c * m],
                );
            }
            vec![Some(gx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(&[3], vec![1.0f64, 2.0, 3.0]).unwrap());
        let y = x.square().sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0f64));
        let y = x.add(x).unwrap().sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0f64));
        let c = tape.constant(Tensor::scalar(5.0f64));
        let y = x.mul(c).unwrap().sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 5.0);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::<f32>::zeros(&[2]));
        assert!(tape.backward(x.square()).is_err());
    }

    #[test]
    fn leading_broadcast_sub_reduces_gradient() {
        let tape = Tape::new();
        let a = tape.param(Tensor::<f64>::from_fn(&[3, 2], |i| i as f64));
        let b = tape.param(Tensor::<f64>::from_fn(&[1, 2], |i| i as f64 * 10.0));
        let d = a.sub(b).unwrap();
        assert_eq!(d.value().data(), &[0.0, -9.0, 2.0, -7.0, 4.0, -5.0]);
        let g = tape.backward(d.sum()).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[-3.0, -3.0]);
        assert!(a.sub(tape.constant(Tensor::zeros(&[2, 2]))).is_err());
    }

    #[test]
    fn scaled_tanh_range() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3], vec![0.0f64, 40.0, -40.0]).unwrap());
        let y = x.scaled_tanh().value();
        assert_eq!(y.data()[0], 127.5);
        assert!((y.data()[1] - 255.0).abs() < 1e-3);
        assert!(y.data()[2].abs() < 1e-3);
    }

    #[test]
    fn gram_of_small_matrices() {
        let tape = Tape::new();
        let eye = tape.constant(Tensor::new(&[1, 2, 1, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap());
        assert_eq!(eye.gram().unwrap().value().data(), &[1.0, 0.0, 0.0, 1.0]);
        let row = tape.constant(Tensor::new(&[1, 1, 1, 3], vec![1.0f64, 2.0, 3.0]).unwrap());
        assert_eq!(row.gram().unwrap().value().data(), &[14.0]);
    }
}
