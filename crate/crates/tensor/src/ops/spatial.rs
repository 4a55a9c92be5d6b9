//! Padding, cropping, pooling and finite differences over NCHW maps.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Mirror index without repeating the edge sample: `-1 -> 1`, `n -> n - 2`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Spatial axis of an NCHW tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Height,
    Width,
}

impl<'t, T: Element> Var<'t, T> {
    pub fn reflection_pad2d(self, pad: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4("reflection_pad2d")?;
        if pad >= h.min(w) {
            return Err(TensorError::invalid(
                "reflection_pad2d",
                format!("pad {pad} must be smaller than both spatial extents of {h}x{w}"),
            ));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let src_index: Vec<usize> = (0..ph * pw)
            .map(|o| {
                let (y, xx) = ((o / pw) as isize - pad as isize, (o % pw) as isize - pad as isize);
                reflect(y, h) * w + reflect(xx, w)
            })
            .collect();
        let mut out = Tensor::zeros(&[n, c, ph, pw]);
        for (dst, src) in out
            .data_mut()
            .chunks_mut(ph * pw)
            .zip(x.data().chunks(h * w))
        {
            for (d, &s) in dst.iter_mut().zip(&src_index) {
                *d = src[s];
            }
        }
        let shape = x.shape().to_vec();
        Ok(self.tape().record(out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&shape);
            for (dst, src) in gx
                .data_mut()
                .chunks_mut(h * w)
                .zip(g.data().chunks(ph * pw))
            {
                for (&gv, &s) in src.iter().zip(&src_index) {
                    dst[s] += gv;
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Window `[top, top + height) x [left, left + width)` of every plane.
    pub fn crop2d(self, top: usize, left: usize, height: usize, width: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4("crop2d")?;
        if height == 0 || width == 0 || top + height > h || left + width > w {
            return Err(TensorError::invalid(
                "crop2d",
                format!("window {height}x{width} at ({top},{left}) exceeds {h}x{w}"),
            ));
        }
        let mut out = Tensor::zeros(&[n, c, height, width]);
        for (dst, src) in out
            .data_mut()
            .chunks_mut(height * width)
            .zip(x.data().chunks(h * w))
        {
            for y in 0..height {
                let s = (top + y) * w + left;
                dst[y * width..(y + 1) * width].copy_from_slice(&src[s..s + width]);
            }
        }
        let shape = x.shape().to_vec();
        Ok(self.tape().record(out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&shape);
            for (dst, src) in gx
                .data_mut()
                .chunks_mut(h * w)
                .zip(g.data().chunks(height * width))
            {
                for y in 0..height {
                    let d = (top + y) * w + left;
                    dst[d..d + width].copy_from_slice(&src[y * width..(y + 1) * width]);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Center crop removing `border` pixels from every side.
    pub fn center_crop(self, border: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if 2 * border >= h.min(w) {
            return Err(TensorError::invalid(
                "center_crop",
                format!("border {border} consumes the whole {h}x{w} plane"),
            ));
        }
        self.crop2d(border, border, h - 2 * border, w - 2 * border)
    }

    /// 2x2 max pooling with stride 2; trailing odd rows/columns are dropped.
    pub fn max_pool2d(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4("max_pool2d")?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(TensorError::invalid(
                "max_pool2d",
                format!("input {h}x{w} too small for 2x2 pooling"),
            ));
        }
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0u32; n * c * oh * ow];
        for (p, (dst, src)) in out
            .data_mut()
            .chunks_mut(oh * ow)
            .zip(x.data().chunks(h * w))
            .enumerate()
        {
            let arg = &mut argmax[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    let base = 2 * y * w + 2 * xx;
                    let mut best = base;
                    for cand in [base + 1, base + w, base + w + 1] {
                        if src[cand] > src[best] {
                            best = cand;
                        }
                    }
                    dst[y * ow + xx] = src[best];
                    arg[y * ow + xx] = best as u32;
                }
            }
        }
        let shape = x.shape().to_vec();
        Ok(self.tape().record(out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&shape);
            for (p, (dst, src)) in gx
                .data_mut()
                .chunks_mut(h * w)
                .zip(g.data().chunks(oh * ow))
                .enumerate()
            {
                for (&gv, &a) in src.iter().zip(&argmax[p * oh * ow..(p + 1) * oh * ow]) {
                    dst[a as usize] += gv;
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Forward difference `x[i + 1] - x[i]` along a spatial axis.
    pub fn diff(self, axis: Axis) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4("diff")?;
        let (oh, ow, step) = match axis {
            Axis::Height => (h - 1, w, w),
            Axis::Width => (h, w - 1, 1),
        };
        if oh == 0 || ow == 0 {
            return Err(TensorError::invalid("diff", format!("plane {h}x{w} too small")));
        }
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        for (dst, src) in out.data_mut().chunks_mut(oh * ow).zip(x.data().chunks(h * w)) {
            for y in 0..oh {
                for xx in 0..ow {
                    let i = y * w + xx;
                    dst[y * ow + xx] = src[i + step] - src[i];
                }
            }
        }
        let shape = x.shape().to_vec();
        Ok(self.tape().record(out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&shape);
            for (dst, src) in gx.data_mut().chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
                for y in 0..oh {
                    for xx in 0..ow {
                        let i = y * w + xx;
                        let gv = src[y * ow + xx];
                        dst[i + step] += gv;
                        dst[i] -= gv;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}
