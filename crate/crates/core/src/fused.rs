//! Fused elementwise kernels with hand-written backward passes: SiLU and the
//! zero-mean unit-variance normalization shared by group and layer norm.

// The kernels are written once for f32 and f64, so casts are no-ops for one of them.
#![allow(clippy::unnecessary_cast)]

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::Result;

fn slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    layout
        .contiguous_offsets()
        .map(|(a, b)| &data[a..b])
        .ok_or_else(|| candle_core::Error::Msg("fused op expects a contiguous tensor".into()))
}

macro_rules! map_float {
    ($storage:expr, $layout:expr, |$v:ident : $t:ident| $body:expr) => {
        match $storage {
            CpuStorage::F32(data) => {
                type $t = f32;
                let $v = slice(data, $layout)?;
                CpuStorage::F32($body)
            }
            CpuStorage::F64(data) => {
                type $t = f64;
                let $v = slice(data, $layout)?;
                CpuStorage::F64($body)
            }
            _ => return Err(candle_core::Error::Msg("fused op supports f32 and f64 only".into())),
        }
    };
}

struct Silu;
struct SiluGrad;

impl CustomOp1 for Silu {
    fn name(&self) -> &'static str {
        "fused-silu"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = map_float!(storage, layout, |x: T| x.iter().map(|&v| v / (1.0 as T + (-v).exp())).collect());
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let d = arg.apply_op1_no_bwd(&SiluGrad)?;
        Ok(Some(grad_res.mul(&d)?))
    }
}

impl CustomOp1 for SiluGrad {
    fn name(&self) -> &'static str {
        "fused-silu-grad"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = map_float!(storage, layout, |x: T| x
            .iter()
            .map(|&v| {
                let s = 1.0 as T / (1.0 as T + (-v).exp());
                s * (1.0 as T + v * (1.0 as T - s))
            })
            .collect());
        Ok((out, layout.shape().clone()))
    }
}

/// `x * sigmoid(x)`.
pub(crate) fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Silu)?)
}

/// Normalizes every row of the last axis to zero mean, unit variance
/// (biased variance, `eps` added before the square root).
struct Standardize {
    eps: f64,
}

/// Backward of [`Standardize`]: inputs are stacked `[y; dy]` rows.
struct StandardizeGrad {
    eps: f64,
    n: usize,
}

fn row_stats<T>(row: &[T]) -> (f64, f64)
where
    T: Copy + Into<f64>,
{
    let n = row.len() as f64;
    let mean = row.iter().map(|&v| v.into()).sum::<f64>() / n;
    let var = row.iter().map(|&v| (v.into() - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

impl CustomOp1 for Standardize {
    fn name(&self) -> &'static str {
        "fused-standardize"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = layout.shape().dims().last().copied().unwrap_or(1).max(1);
        let eps = self.eps;
        let out = map_float!(storage, layout, |x: T| {
            let mut out = Vec::with_capacity(x.len());
            for row in x.chunks(n) {
                let (mean, var) = row_stats(row);
                let inv = 1.0 / (var + eps).sqrt();
                out.extend(row.iter().map(|&v| ((v as f64 - mean) * inv) as T));
            }
            out
        });
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let n = arg.dims().last().copied().unwrap_or(1);
        // The gradient needs x (for y and the row scale) and dy; pack both rows
        // side by side so a single op sees them.
        let _ = res;
        let packed = Tensor::cat(&[&arg.contiguous()?, &grad_res.contiguous()?], arg.rank() - 1)?;
        Ok(Some(packed.apply_op1_no_bwd(&StandardizeGrad { eps: self.eps, n })?))
    }
}

impl CustomOp1 for StandardizeGrad {
    fn name(&self) -> &'static str {
        "fused-standardize-grad"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = self.n;
        let eps = self.eps;
        let out = map_float!(storage, layout, |p: T| {
            let mut out = Vec::with_capacity(p.len() / 2);
            for row in p.chunks(2 * n) {
                let (x, dy) = row.split_at(n);
                let (mean, var) = row_stats(x);
                let inv = 1.0 / (var + eps).sqrt();
                let y: Vec<f64> = x.iter().map(|&v| (v as f64 - mean) * inv).collect();
                let mean_dy = dy.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
                let mean_dy_y = dy.iter().zip(&y).map(|(&g, &yy)| g as f64 * yy).sum::<f64>() / n as f64;
                out.extend(
                    dy.iter()
                        .zip(&y)
                        .map(|(&g, &yy)| (inv * (g as f64 - mean_dy - yy * mean_dy_y)) as T),
                );
            }
            out
        });
        let mut dims = layout.shape().dims().to_vec();
        if let Some(last) = dims.last_mut() {
            *last = n;
        }
        Ok((out, Shape::from(dims)))
    }
}

/// Standardizes along the last axis.
pub(crate) fn standardize(x: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Standardize { eps })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_util::{seeded_gaussian, to_vec_f64};
    use candle_core::{DType, Device, Var, D};

    fn close(a: &Tensor, b: &Tensor, tol: f64) {
        for (u, v) in to_vec_f64(a).unwrap().iter().zip(&to_vec_f64(b).unwrap()) {
            assert!((u - v).abs() <= tol, "{u} vs {v}");
        }
    }

    fn reference_standardize(x: &Tensor, eps: f64) -> Tensor {
        let mean = x.mean_keepdim(D::Minus1).unwrap();
        let c = x.broadcast_sub(&mean).unwrap();
        let var = c.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
        c.broadcast_div(&(var + eps).unwrap().sqrt().unwrap()).unwrap()
    }

    #[test]
    fn silu_matches_composed_ops_with_gradient() {
        let x = Var::from_tensor(&(seeded_gaussian((3, 7), DType::F64, &Device::Cpu, 1).unwrap() * 3.0).unwrap()).unwrap();
        let probe = seeded_gaussian((3, 7), DType::F64, &Device::Cpu, 2).unwrap();
        let ours = silu(x.as_tensor()).unwrap();
        let theirs = x.as_tensor().silu().unwrap();
        close(&ours, &theirs, 1e-12);
        let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (theirs * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        close(g1.get(x.as_tensor()).unwrap(), g2.get(x.as_tensor()).unwrap(), 1e-12);
    }

    #[test]
    fn standardize_matches_composed_ops_with_gradient() {
        let x = Var::from_tensor(&seeded_gaussian((2, 3, 10), DType::F64, &Device::Cpu, 3).unwrap().affine(2.0, 0.5).unwrap()).unwrap();
        let probe = seeded_gaussian((2, 3, 10), DType::F64, &Device::Cpu, 4).unwrap();
        let ours = standardize(x.as_tensor(), 1e-5).unwrap();
        let theirs = reference_standardize(x.as_tensor(), 1e-5);
        close(&ours, &theirs, 1e-12);
        let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (theirs * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        close(g1.get(x.as_tensor()).unwrap(), g2.get(x.as_tensor()).unwrap(), 1e-10);
    }
}
