//! Convolution and transposed convolution lowered onto GEMM via im2col.
//!
//! Columns are materialized in row tiles so peak scratch memory stays bounded
//! at large resolutions.

use rayon::prelude::*;

use crate::element::{Element, Layout};
use crate::error::{Result, TensorError};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Upper bound on the number of scratch column elements per tile.
const COLUMN_BUDGET: usize = 1 << 22;

/// Geometry of a correlation between an image side `[c, h, w]` and a column
/// side `[c * kh * kw, oh * ow]`.
#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn tile_rows(&self) -> usize {
        (COLUMN_BUDGET / (self.rows() * self.ow).max(1)).clamp(1, self.oh)
    }

    fn tiles(&self) -> impl Iterator<Item = (usize, usize)> {
        let step = self.tile_rows();
        let oh = self.oh;
        (0..oh).step_by(step).map(move |y0| (y0, (y0 + step).min(oh)))
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Range of output columns `ox` whose input column `ox * stride + kj - pad`
    /// falls inside the image.
    fn valid_ox(&self, kj: usize) -> (usize, usize) {
        let lo = if kj >= self.pad {
            0
        } else {
            (self.pad - kj).div_ceil(self.stride)
        };
        // ox * stride + kj - pad <= w - 1
        let limit = self.w + self.pad;
        let hi = if limit > kj {
            ((limit - kj - 1) / self.stride + 1).min(self.ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

fn im2col<T: Element>(x: &[T], g: &Geom, oy0: usize, oy1: usize, cols: &mut [T]) {
    let span = (oy1 - oy0) * g.ow;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * span..(row + 1) * span];
                let (lo, hi) = g.valid_ox(kj);
                for oy in oy0..oy1 {
                    let dst = &mut dst_row[(oy - oy0) * g.ow..(oy - oy0 + 1) * g.ow];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if lo < hi {
                        let ix0 = lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            dst[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (k, d) in dst[lo..hi].iter_mut().enumerate() {
                                *d = src[ix0 + k * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &Geom, oy0: usize, oy1: usize, x: &mut [T]) {
    let span = (oy1 - oy0) * g.ow;
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * span..(row + 1) * span];
                let (lo, hi) = g.valid_ox(kj);
                if lo >= hi {
                    continue;
                }
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &src_row[(oy - oy0) * g.ow..(oy - oy0 + 1) * g.ow];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let ix0 = lo * g.stride + kj - g.pad;
                    for (k, &v) in src[lo..hi].iter().enumerate() {
                        dst[ix0 + k * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// `out[m, cols of tile] = a[m, k] * cols_tile[k, tile]`, writing into a
/// row-major `[m, full]` destination starting at column `col0`.
#[allow(clippy::too_many_arguments)]
fn gemm_into_columns<T: Element>(
    m: usize,
    k: usize,
    a: &[T],
    a_layout: Layout,
    tile: &[T],
    tile_cols: usize,
    out: &mut [T],
    full: usize,
    col0: usize,
    beta: T,
) {
    let a_strides = match a_layout {
        Layout::Normal => (k, 1),
        Layout::Transposed => (1, m),
    };
    T::gemm_raw(
        m,
        k,
        tile_cols,
        T::one(),
        a,
        a_strides,
        tile,
        (tile_cols, 1),
        beta,
        &mut out[col0..],
        (full, 1),
    );
}

fn add_bias<T: Element>(out: &mut [T], bias: Option<&Tensor<T>>, plane: usize) {
    if let Some(b) = bias {
        for (chunk, &bv) in out.chunks_mut(plane).zip(b.data()) {
            for v in chunk {
                *v += bv;
            }
        }
    }
}

fn bias_grad<T: Element>(g: &Tensor<T>, k: usize) -> Tensor<T> {
    let plane = g.len() / (g.shape()[0] * k);
    let mut out = vec![T::zero(); k];
    for (i, chunk) in g.data().chunks(plane).enumerate() {
        out[i % k] += chunk.iter().copied().sum::<T>();
    }
    Tensor::new(&[k], out).expect("k > 0")
}

fn check_bias<T: Element>(op: &'static str, bias: Option<&Var<'_, T>>, k: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [k] {
            return Err(TensorError::shape(op, &[k], &b.shape()));
        }
    }
    Ok(())
}

impl<'t, T: Element> Var<'t, T> {
    /// Cross-correlation of `[N, C, H, W]` with `[K, C, kh, kw]` weights.
    pub fn conv2d(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let wt = weight.value();
        let (n, c, h, w) = x.dims4("conv2d")?;
        let (k, wc, kh, kw) = wt.dims4("conv2d")?;
        if wc != c {
            return Err(TensorError::shape("conv2d", &[k, c, kh, kw], wt.shape()));
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be at least 1"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(TensorError::invalid(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        check_bias("conv2d", bias.as_ref(), k)?;
        let g = Geom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        };
        let ohw = g.oh * g.ow;
        let rows = g.rows();
        let bias_value = bias.map(|b| b.value());

        let mut out = Tensor::zeros(&[n, k, g.oh, g.ow]);
        let (xd, wd, bias_ref) = (x.data(), wt.data(), bias_value.as_deref());
        out.data_mut()
            .par_chunks_mut(k * ohw)
            .enumerate()
            .for_each(|(b, ob)| {
                let xb = &xd[b * c * h * w..(b + 1) * c * h * w];
                if g.is_pointwise() {
                    gemm_into_columns(k, rows, wd, Layout::Normal, xb, ohw, ob, ohw, 0, T::zero());
                } else {
                    let mut cols = vec![T::zero(); rows * g.tile_rows() * g.ow];
                    for (y0, y1) in g.tiles() {
                        let span = (y1 - y0) * g.ow;
                        im2col(xb, &g, y0, y1, &mut cols[..rows * span]);
                        gemm_into_columns(
                            k,
                            rows,
                            wd,
                            Layout::Normal,
                            &cols[..rows * span],
                            span,
                            ob,
                            ohw,
                            y0 * g.ow,
                            T::zero(),
                        );
                    }
                }
                add_bias(ob, bias_ref, ohw);
            });

        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(self.tape().record(out, &inputs, move |gy, needs| {
            let gx = needs[0].then(|| {
                let mut gx = Tensor::zeros(x.shape());
                let wd = wt.data();
                gx.data_mut()
                    .par_chunks_mut(c * h * w)
                    .enumerate()
                    .for_each(|(b, gxb)| {
                        let gyb = &gy.data()[b * k * ohw..(b + 1) * k * ohw];
                        if g.is_pointwise() {
                            gemm_into_columns(rows, k, wd, Layout::Transposed, gyb, ohw, gxb, ohw, 0, T::zero());
                            return;
                        }
                        let mut cols = vec![T::zero(); rows * g.tile_rows() * g.ow];
                        for (y0, y1) in g.tiles() {
                            let span = (y1 - y0) * g.ow;
                            // dcols[rows, span] = W^T[rows, k] * gy[k, span]
                            T::gemm_raw(
                                rows,
                                k,
                                span,
                                T::one(),
                                wd,
                                (1, rows),
                                &gyb[y0 * g.ow..],
                                (ohw, 1),
                                T::zero(),
                                &mut cols[..rows * span],
                                (span, 1),
                            );
                            col2im(&cols[..rows * span], &g, y0, y1, gxb);
                        }
                    });
                gx
            });
            let gw = needs[1].then(|| {
                let mut gw = Tensor::zeros(wt.shape());
                let mut cols = vec![T::zero(); rows * g.tile_rows() * g.ow];
                let mut first = true;
                for b in 0..n {
                    let xb = &x.data()[b * c * h * w..(b + 1) * c * h * w];
                    let gyb = &gy.data()[b * k * ohw..(b + 1) * k * ohw];
                    for (y0, y1) in g.tiles() {
                        let span = (y1 - y0) * g.ow;
                        let tile: &[T] = if g.is_pointwise() {
                            xb
                        } else {
                            im2col(xb, &g, y0, y1, &mut cols[..rows * span]);
                            &cols[..rows * span]
                        };
                        let tile_stride = if g.is_pointwise() { ohw } else { span };
                        let tile_off = if g.is_pointwise() { y0 * g.ow } else { 0 };
                        // dW[k, rows] += gy[k, span] * tile[rows, span]^T
                        T::gemm_raw(
                            k,
                            span,
                            rows,
                            T::one(),
                            &gyb[y0 * g.ow..],
                            (ohw, 1),
                            &tile[tile_off..],
                            (1, tile_stride),
                            if first { T::zero() } else { T::one() },
                            gw.data_mut(),
                            (rows, 1),
                        );
                        first = false;
                    }
                }
                gw
            });
            let mut grads = vec![gx, gw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| bias_grad(gy, k)));
            }
            grads
        }))
    }

    /// Transposed convolution of `[N, C, H, W]` with `[C, K, kh, kw]` weights;
    /// output spatial size is `(H - 1) * stride - 2 * pad + kh`.
    pub fn conv_transpose2d(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let wt = weight.value();
        let (n, c, h, w) = x.dims4("conv_transpose2d")?;
        let (wc, k, kh, kw) = wt.dims4("conv_transpose2d")?;
        if wc != c {
            return Err(TensorError::shape("conv_transpose2d", &[c, k, kh, kw], wt.shape()));
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv_transpose2d", "stride must be at least 1"));
        }
        let full_h = (h - 1) * stride + kh;
        let full_w = (w - 1) * stride + kw;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(TensorError::invalid(
                "conv_transpose2d",
                format!("padding {pad} leaves an empty output"),
            ));
        }
        check_bias("conv_transpose2d", bias.as_ref(), k)?;
        // The image side of the correlation is the output, the column side the input.
        let g = Geom {
            c: k,
            h: full_h - 2 * pad,
            w: full_w - 2 * pad,
            kh,
            kw,
            stride,
            pad,
            oh: h,
            ow: w,
        };
        let (out_h, out_w) = (g.h, g.w);
        let hw = h * w;
        let rows = g.rows();
        let bias_value = bias.map(|b| b.value());

        let mut out = Tensor::zeros(&[n, k, out_h, out_w]);
        let (xd, wd, bias_ref) = (x.data(), wt.data(), bias_value.as_deref());
        out.data_mut()
            .par_chunks_mut(k * out_h * out_w)
            .enumerate()
            .for_each(|(b, ob)| {
                let xb = &xd[b * c * hw..(b + 1) * c * hw];
                let mut cols = vec![T::zero(); rows * g.tile_rows() * g.ow];
                for (y0, y1) in g.tiles() {
                    let span = (y1 - y0) * g.ow;
                    // cols[rows, span] = W^T[rows, c] * x[c, span]
                    T::gemm_raw(
                        rows,
                        c,
                        span,
                        T::one(),
                        wd,
                        (1, rows),
                        &xb[y0 * w..],
                        (hw, 1),
                        T::zero(),
                        &mut cols[..rows * span],
                        (span, 1),
                    );
                    col2im(&cols[..rows * span], &g, y0, y1, ob);
                }
                add_bias(ob, bias_ref, out_h * out_w);
            });

        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(self.tape().record(out, &inputs, move |gy, needs| {
            let plane = k * out_h * out_w;
            let gx = needs[0].then(|| {
                let mut gx = Tensor::zeros(x.shape());
                let wd = wt.data();
                gx.data_mut()
                    .par_chunks_mut(c * hw)
                    .enumerate()
                    .for_each(|(b, gxb)| {
                        let gyb = &gy.data()[b * plane..(b + 1) * plane];
                        let mut cols = vec![T::zero(); rows * g.tile_rows() * g.ow];
                        for (y0, y1) in g.tiles() {
                            let span = (y1 - y0) * g.ow;
                            im2col(gyb, &g, y0, y1, &mut cols[..rows * span]);
                            gemm_into_columns(
                                c,
                                rows,
                                wd,
                                Layout::Normal,
                                &cols[..rows * span],
                                span,
                                gxb,
                                hw,
                                y0 * w,
                                T::zero(),
                            );
                        }
                    });
                gx
            });
            let gw = needs[1].then(|| {
                let mut gw = Tensor::zeros(wt.shape());
                let mut cols = vec![T::zero(); rows * g.tile_rows() * g.ow];
                let mut first = true;
                for b in 0..n {
                    let xb = &x.data()[b * c * hw..(b + 1) * c * hw];
                    let gyb = &gy.data()[b * plane..(b + 1) * plane];
                    for (y0, y1) in g.tiles() {
                        let span = (y1 - y0) * g.ow;
                        im2col(gyb, &g, y0, y1, &mut cols[..rows * span]);
                        // dW[c, rows] += x[c, span] * cols[rows, span]^T
                        T::gemm_raw(
                            c,
                            span,
                            rows,
                            T::one(),
                            &xb[y0 * w..],
                            (hw, 1),
                            &cols[..rows * span],
                            (1, span),
                            if first { T::zero() } else { T::one() },
                            gw.data_mut(),
                            (rows, 1),
                        );
                        first = false;
                    }
                }
                gw
            });
            let mut grads = vec![gx, gw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| bias_grad(gy, k)));
            }
            grads
        }))
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad)
        .checked_sub(kernel)
        .filter(|_| stride > 0)
        .map(|r| r / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    ((input.checked_sub(1)?) * stride + kernel).checked_sub(2 * pad).filter(|&v| v > 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    #[test]
    fn valid_ox_covers_exactly_the_in_bounds_columns() {
        for (w, k, s, p) in [(7, 3, 1, 1), (7, 3, 2, 1), (8, 4, 2, 1), (5, 9, 1, 4), (6, 3, 3, 0)] {
            let ow = (w + 2 * p - k) / s + 1;
            let g = Geom { c: 1, h: 1, w, kh: 1, kw: k, stride: s, pad: p, oh: 1, ow };
            for kj in 0..k {
                let (lo, hi) = g.valid_ox(kj);
                for ox in 0..ow {
                    let ix = (ox * s + kj) as isize - p as isize;
                    let inside = ix >= 0 && ix < w as isize;
                    assert_eq!(inside, ox >= lo && ox < hi, "w{w} k{k} s{s} p{p} kj{kj} ox{ox}");
                }
            }
        }
    }

    #[test]
    fn ones_kernel_over_ones_gives_nine() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f32>::ones(&[1, 1, 3, 3]));
        let w = tape.constant(Tensor::<f32>::ones(&[1, 1, 3, 3]));
        let y = x.conv2d(w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn transpose_of_single_pixel_broadcasts() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f32>::full(&[1, 1, 1, 1], 2.5));
        let w = tape.constant(Tensor::<f32>::ones(&[1, 1, 2, 2]));
        let y = x.conv_transpose2d(w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 2, 2]);
        assert_eq!(y.value().data(), &[2.5; 4]);
    }

    #[test]
    fn channel_mismatch_reports_shapes() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f32>::zeros(&[1, 2, 5, 5]));
        let w = tape.constant(Tensor::<f32>::zeros(&[4, 3, 3, 3]));
        match x.conv2d(w, None, 1, 1) {
            Err(TensorError::ShapeMismatch { expected, actual, .. }) => {
                assert_eq!(expected, vec![4, 2, 3, 3]);
                assert_eq!(actual, vec![4, 3, 3, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(x.conv2d(tape.constant(Tensor::zeros(&[1, 2, 9, 9])), None, 1, 1).is_err());
        assert!(x.conv2d(tape.constant(Tensor::zeros(&[1, 2, 3, 3])), None, 0, 1).is_err());
    }

    #[test]
    fn size_helpers() {
        assert_eq!(conv_output_size(280, 3, 2, 1), Some(140));
        assert_eq!(conv_output_size(2, 5, 1, 0), None);
        assert_eq!(conv_transpose_output_size(128, 4, 2, 1), Some(256));
        assert_eq!(conv_transpose_output_size(54, 4, 2, 1), Some(108));
    }
}
