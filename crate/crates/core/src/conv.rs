//! Convolution as unfold + matmul. The unfold (`im2col`) and its adjoint
//! (`col2im`) are custom ops so that the backward pass stays a pair of
//! matmuls instead of a transposed convolution.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::{DacError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.padding - self.kh) / self.stride + 1,
            (self.w + 2 * self.padding - self.kw) / self.stride + 1,
        )
    }

    /// Calls `f(col_index, image_index)` for every in-bounds tap of one sample.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (oh, ow) = self.out_hw();
        let (s, p) = (self.stride as isize, self.padding as isize);
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * oh * ow;
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (ci * self.h + iy as usize) * self.w;
                        for ox in 0..ow {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(row + oy * ow + ox, base + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn col_len(&self) -> usize {
        let (oh, ow) = self.out_hw();
        self.c * self.kh * self.kw * oh * ow
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => Err(candle_core::Error::Msg("unfold expects a contiguous tensor".into())),
    }
}

struct Im2Col(Geometry);
struct Col2Im(Geometry);

macro_rules! dispatch {
    ($storage:expr, $layout:expr, |$v:ident| $body:expr) => {
        match $storage {
            CpuStorage::F32(data) => {
                let $v = contiguous_slice(data, $layout)?;
                CpuStorage::F32($body)
            }
            CpuStorage::F64(data) => {
                let $v = contiguous_slice(data, $layout)?;
                CpuStorage::F64($body)
            }
            _ => return Err(candle_core::Error::Msg("unfold supports f32 and f64 only".into())),
        }
    };
}

fn unfold<T: Copy + Default>(g: &Geometry, x: &[T], batch: usize) -> Vec<T> {
    let (img, col) = (g.c * g.h * g.w, g.col_len());
    let mut out = vec![T::default(); batch * col];
    for b in 0..batch {
        let (src, dst) = (&x[b * img..(b + 1) * img], &mut out[b * col..(b + 1) * col]);
        g.for_each_tap(|ci, ii| dst[ci] = src[ii]);
    }
    out
}

fn fold<T: Copy + Default + std::ops::AddAssign>(g: &Geometry, cols: &[T], batch: usize) -> Vec<T> {
    let (img, col) = (g.c * g.h * g.w, g.col_len());
    let mut out = vec![T::default(); batch * img];
    for b in 0..batch {
        let (src, dst) = (&cols[b * col..(b + 1) * col], &mut out[b * img..(b + 1) * img]);
        g.for_each_tap(|ci, ii| dst[ii] += src[ci]);
    }
    out
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let batch = layout.shape().dims()[0];
        let (oh, ow) = g.out_hw();
        let out = dispatch!(storage, layout, |x| unfold(g, x, batch));
        Ok((out, Shape::from((batch, g.c * g.kh * g.kw, oh * ow))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let batch = layout.shape().dims()[0];
        let out = dispatch!(storage, layout, |c| fold(g, c, batch));
        Ok((out, Shape::from((batch, g.c, g.h, g.w))))
    }
}

/// Unfolds `(b, c, h, w)` into `(b, c*kh*kw, oh*ow)` patch columns, ordered to
/// match a `(c_out, c, kh, kw)` kernel flattened to `(c_out, c*kh*kw)`.
pub(crate) fn im2col(x: &Tensor, kh: usize, kw: usize, stride: usize, padding: usize) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(DacError::Shape(format!(
            "kernel {kh}x{kw} (stride {stride}, padding {padding}) does not fit a {h}x{w} input"
        )));
    }
    if kh == 1 && kw == 1 && stride == 1 && padding == 0 {
        return Ok(x.flatten_from(2)?);
    }
    let g = Geometry {
        c,
        h,
        w,
        kh,
        kw,
        stride,
        padding,
    };
    Ok(x.contiguous()?.apply_op1(Im2Col(g))?)
}

/// Output spatial size of a convolution.
pub(crate) fn conv_out_hw(h: usize, w: usize, kh: usize, kw: usize, stride: usize, padding: usize) -> (usize, usize) {
    ((h + 2 * padding - kh) / stride + 1, (w + 2 * padding - kw) / stride + 1)
}

/// `(c_out, n) x (b, n, p) -> (b, c_out, p)` without materializing a
/// broadcast copy of the weight per sample.
pub(crate) fn weight_matmul(w: &Tensor, cols: &Tensor) -> Result<Tensor> {
    let (b, n, p) = cols.dims3()?;
    let c_out = w.dim(0)?;
    // (b, n, p) -> (n, b*p), multiply, then back to (b, c_out, p).
    let flat = cols.transpose(0, 1)?.contiguous()?.reshape((n, b * p))?;
    let out = w.matmul(&flat)?.reshape((c_out, b, p))?.transpose(0, 1)?;
    Ok(out.contiguous()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_util::{seeded_gaussian, to_vec_f64};
    use candle_core::{DType, Device, Var};

    fn conv_via_unfold(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Tensor {
        let (b, _, h, wd) = x.dims4().unwrap();
        let (co, ci, kh, kw) = w.dims4().unwrap();
        let cols = im2col(x, kh, kw, stride, padding).unwrap();
        let (oh, ow) = conv_out_hw(h, wd, kh, kw, stride, padding);
        weight_matmul(&w.reshape((co, ci * kh * kw)).unwrap(), &cols)
            .unwrap()
            .reshape((b, co, oh, ow))
            .unwrap()
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
        let (a, b) = (to_vec_f64(a).unwrap(), to_vec_f64(b).unwrap());
        assert_eq!(a.len(), b.len());
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() <= tol, "{u} vs {v}");
        }
    }

    #[test]
    fn matches_builtin_convolution() {
        for (k, stride, padding) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 1, 0)] {
            let x = seeded_gaussian((2, 3, 6, 5), DType::F64, &Device::Cpu, 1).unwrap();
            let w = seeded_gaussian((4, 3, k, k), DType::F64, &Device::Cpu, 2).unwrap();
            let oracle = x.conv2d(&w, padding, stride, 1, 1).unwrap();
            assert_close(&conv_via_unfold(&x, &w, stride, padding), &oracle, 1e-12);
        }
    }

    #[test]
    fn gradients_match_builtin_convolution() {
        let x = Var::from_tensor(&seeded_gaussian((2, 3, 5, 5), DType::F64, &Device::Cpu, 3).unwrap()).unwrap();
        let w = Var::from_tensor(&seeded_gaussian((4, 3, 3, 3), DType::F64, &Device::Cpu, 4).unwrap()).unwrap();
        let probe = seeded_gaussian((2, 4, 5, 5), DType::F64, &Device::Cpu, 5).unwrap();
        let ours = (conv_via_unfold(x.as_tensor(), w.as_tensor(), 1, 1) * &probe).unwrap().sum_all().unwrap();
        let theirs = (x.as_tensor().conv2d(w.as_tensor(), 1, 1, 1, 1).unwrap() * &probe)
            .unwrap()
            .sum_all()
            .unwrap();
        let (g1, g2) = (ours.backward().unwrap(), theirs.backward().unwrap());
        assert_close(g1.get(x.as_tensor()).unwrap(), g2.get(x.as_tensor()).unwrap(), 1e-10);
        assert_close(g1.get(w.as_tensor()).unwrap(), g2.get(w.as_tensor()).unwrap(), 1e-10);
    }

    #[test]
    fn rejects_kernel_larger_than_input() {
        let x = Tensor::zeros((1, 1, 2, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(im2col(&x, 5, 5, 1, 0).is_err());
    }
}
