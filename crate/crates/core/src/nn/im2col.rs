//! Patch extraction for channels-last convolutions.
//!
//! A convolution over an `(B, H, W, C)` tensor is computed as a single matmul
//! between the unfolded patches `(B*Ho*Wo, k*k*C)` and a `(k*k*C, Cout)` weight.
//! The backward pass of the unfold is the matching fold (scatter-add).

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Unfold {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Unfold {
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    /// Visits every (patch row offset, source pixel offset) pair.
    fn for_each_tap(&self, dims: (usize, usize, usize, usize), mut f: impl FnMut(usize, usize)) {
        let (b, h, w, c) = dims;
        let (ho, wo) = self.output_hw(h, w);
        let k = self.kernel;
        let row_len = k * k * c;
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = ((bi * ho + oy) * wo + ox) * row_len;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = ((bi * h + iy as usize) * w + ix as usize) * c;
                            f(base + (ky * k + kx) * c, src);
                        }
                    }
                }
            }
        }
    }

    fn unfold<T: Copy + Default>(&self, x: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
        let (b, h, w, c) = dims;
        let (ho, wo) = self.output_hw(h, w);
        let mut out = vec![T::default(); b * ho * wo * self.kernel * self.kernel * c];
        self.for_each_tap(dims, |dst, src| {
            out[dst..dst + c].copy_from_slice(&x[src..src + c]);
        });
        out
    }

    fn fold<T: Copy + Default + std::ops::AddAssign>(
        &self,
        cols: &[T],
        dims: (usize, usize, usize, usize),
    ) -> Vec<T> {
        let (b, h, w, c) = dims;
        let mut out = vec![T::default(); b * h * w * c];
        self.for_each_tap(dims, |dst, src| {
            for i in 0..c {
                out[src + i] += cols[dst + i];
            }
        });
        out
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("unfold expects a contiguous tensor"),
    }
}

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let (b, h, w, c) = dims;
        if h + 2 * self.padding < self.kernel || w + 2 * self.padding < self.kernel {
            candle_core::bail!("unfold: kernel {} larger than padded input {h}x{w}", self.kernel);
        }
        let (ho, wo) = self.output_hw(h, w);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.unfold(contiguous_slice(v, layout)?, dims)),
            CpuStorage::F64(v) => CpuStorage::F64(self.unfold(contiguous_slice(v, layout)?, dims)),
            _ => candle_core::bail!("unfold: unsupported dtype"),
        };
        Ok((out, Shape::from((b, ho, wo, self.kernel * self.kernel * c))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let fold = Fold { unfold: *self, dims: arg.dims4()? };
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&fold)?))
    }
}

struct Fold {
    unfold: Unfold,
    dims: (usize, usize, usize, usize),
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.unfold.fold(contiguous_slice(v, layout)?, self.dims)),
            CpuStorage::F64(v) => CpuStorage::F64(self.unfold.fold(contiguous_slice(v, layout)?, self.dims)),
            _ => candle_core::bail!("fold: unsupported dtype"),
        };
        Ok((out, Shape::from(self.dims)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn fold_is_adjoint_of_unfold() -> candle_core::Result<()> {
        // <unfold(x), y> == <x, fold(y)> for random x, y.
        let dev = Device::Cpu;
        let op = Unfold { kernel: 3, stride: 2, padding: 1 };
        let x = Tensor::randn(0f64, 1.0, (2, 5, 6, 3), &dev)?;
        let u = x.apply_op1(op)?;
        let y = Tensor::randn(0f64, 1.0, u.shape(), &dev)?;
        let lhs = (u * &y)?.sum_all()?.to_scalar::<f64>()?;
        let folded = y.apply_op1_no_bwd(&Fold { unfold: op, dims: x.dims4()? })?;
        let rhs = (x * folded)?.sum_all()?.to_scalar::<f64>()?;
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        Ok(())
    }

    #[test]
    fn unfold_identity_kernel() -> candle_core::Result<()> {
        let dev = Device::Cpu;
        let op = Unfold { kernel: 1, stride: 1, padding: 0 };
        let x = Tensor::arange(0f32, 24.0, &dev)?.reshape((1, 2, 3, 4))?;
        let u = x.apply_op1(op)?;
        assert_eq!(u.dims(), &[1, 2, 3, 4]);
        assert_eq!(u.flatten_all()?.to_vec1::<f32>()?, x.flatten_all()?.to_vec1::<f32>()?);
        Ok(())
    }
}
