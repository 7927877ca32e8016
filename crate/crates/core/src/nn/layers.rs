use candle_core::{DType, Tensor, D};

use super::{ParamStore, Unfold};
use crate::error::{Error, Result};

/// Dense layer, `y = x W + b` over the last dimension.
#[derive(Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        let weight = store.randn(&format!("{name}.weight"), &[input, output], (input as f64).powf(-0.5))?;
        let bias = Some(store.zeros(&format!("{name}.bias"), &[output])?);
        Ok(Self { weight, bias })
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        let weight = store.randn(&format!("{name}.weight"), &[input, output], (input as f64).powf(-0.5))?;
        Ok(Self { weight, bias: None })
    }

    /// Output weights start at zero so a residual branch begins as identity.
    pub fn zero_init(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        let weight = store.zeros(&format!("{name}.weight"), &[input, output])?;
        let bias = Some(store.zeros(&format!("{name}.bias"), &[output])?);
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let input = *dims.last().ok_or_else(|| Error::invalid("linear on a scalar"))?;
        let rows = x.elem_count() / input.max(1);
        let mut y = x.reshape((rows, input))?.matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(1)?;
        Ok(y.reshape(out_dims)?)
    }
}

/// Channels-last 2-D convolution with square kernels.
#[derive(Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    unfold: Unfold,
    out_channels: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = kernel * kernel * in_channels;
        let weight = store.randn(
            &format!("{name}.weight"),
            &[fan_in, out_channels],
            (fan_in as f64).powf(-0.5),
        )?;
        Self::finish(store, name, weight, kernel, stride, out_channels)
    }

    pub fn zero_init(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        let weight = store.zeros(&format!("{name}.weight"), &[kernel * kernel * in_channels, out_channels])?;
        Self::finish(store, name, weight, kernel, 1, out_channels)
    }

    fn finish(
        store: &mut ParamStore,
        name: &str,
        weight: Tensor,
        kernel: usize,
        stride: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let bias = store.zeros(&format!("{name}.bias"), &[out_channels])?;
        let unfold = Unfold { kernel, stride, padding: kernel / 2 };
        Ok(Self { weight, bias, unfold, out_channels })
    }

    /// `(B, H, W, Cin) -> (B, Ho, Wo, Cout)`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let (cols, ho, wo) = if self.unfold.kernel == 1 && self.unfold.stride == 1 {
            (x.reshape((b * h * w, c))?, h, w)
        } else {
            let cols = x.contiguous()?.apply_op1(self.unfold)?;
            let (_, ho, wo, k) = cols.dims4()?;
            (cols.reshape((b * ho * wo, k))?, ho, wo)
        };
        let y = cols.matmul(&self.weight)?.broadcast_add(&self.bias)?;
        Ok(y.reshape((b, ho, wo, self.out_channels))?)
    }
}

/// Group normalisation over channels-last feature maps.
#[derive(Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, groups: usize, channels: usize) -> Result<Self> {
        if channels % groups != 0 {
            return Err(Error::invalid(format!("{channels} channels not divisible into {groups} groups")));
        }
        Ok(Self {
            gamma: store.constant(&format!("{name}.gamma"), &[channels], 1.0)?,
            beta: store.zeros(&format!("{name}.beta"), &[channels])?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let g = x.reshape((b, h * w, self.groups, c / self.groups))?;
        let mean = g.mean_keepdim((1, 3))?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim((1, 3))?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .reshape((b, h, w, c))?
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)?)
    }
}

/// Layer normalisation over the last dimension.
#[derive(Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: store.zeros(&format!("{name}.beta"), &[dim])?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Lookup table of learned row vectors.
#[derive(Clone)]
pub struct Embedding {
    table: Tensor,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, rows: usize, dim: usize, std: f64) -> Result<Self> {
        Ok(Self { table: store.randn(&format!("{name}.table"), &[rows, dim], std)? })
    }

    pub fn rows(&self) -> usize {
        self.table.dim(0).unwrap_or(0)
    }

    pub fn dim(&self) -> usize {
        self.table.dim(1).unwrap_or(0)
    }

    /// Rows for the given ids, shaped `(ids.len(), dim)`.
    pub fn lookup(&self, ids: &[u32]) -> Result<Tensor> {
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= self.rows()) {
            return Err(Error::invalid(format!("embedding id {bad} out of range {}", self.rows())));
        }
        let idx = Tensor::from_slice(ids, ids.len(), self.table.device())?;
        Ok(self.table.index_select(&idx, 0)?)
    }
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    // The max shift cancels in the gradient, so it can be detached.
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Per-row key validity, `(B, Lk)` with 1 for real keys and 0 for padding.
#[derive(Clone, Debug)]
pub struct KeyMask(pub Tensor);

/// Multi-head scaled dot-product attention on `(B, L, D)` inputs.
///
/// A query row whose keys are all masked yields a zero vector.
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    causal: bool,
    key_mask: Option<&KeyMask>,
) -> Result<Tensor> {
    let (b, lq, d) = q.dims3()?;
    let lk = k.dim(1)?;
    if d % heads != 0 {
        return Err(Error::invalid(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let split = |t: &Tensor, l: usize| -> Result<Tensor> {
        Ok(t.reshape((b, l, heads, dh))?.transpose(1, 2)?.contiguous()?)
    };
    let (qh, kh, vh) = (split(q, lq)?, split(k, lk)?, split(v, lk)?);
    let mut scores = (qh.matmul(&kh.t()?)? * (dh as f64).powf(-0.5))?;
    let dtype = scores.dtype();
    if causal {
        // Key j is visible to query i iff j <= i.
        let allowed = Tensor::tril2(lk, DType::F64, q.device())?.narrow(0, 0, lq)?;
        let bias = ((allowed - 1.0)? * 1e9)?.to_dtype(dtype)?;
        scores = scores.broadcast_add(&bias)?;
    }
    let keep = match key_mask {
        Some(KeyMask(m)) => {
            let keep = m.to_dtype(dtype)?.reshape((b, 1, 1, lk))?;
            scores = scores.broadcast_add(&((&keep - 1.0)? * 1e9)?)?;
            Some(keep)
        }
        None => None,
    };
    let mut weights = softmax_last(&scores)?;
    if let Some(keep) = keep {
        weights = weights.broadcast_mul(&keep)?;
    }
    let out = weights.matmul(&vh)?;
    Ok(out.transpose(1, 2)?.reshape((b, lq, d))?)
}

/// Nearest-neighbour 2x upsampling of `(B, H, W, C)`.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape((b, h, 1, w, 1, c))?
        .broadcast_as((b, h, 2, w, 2, c))?
        .reshape((b, 2 * h, 2 * w, c))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn naive_conv(x: &[f64], dims: (usize, usize, usize, usize), w: &[f64], cout: usize, k: usize, stride: usize) -> Vec<f64> {
        let (b, h, wd, c) = dims;
        let pad = k / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; b * ho * wo * cout];
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    for o in 0..cout {
                        let mut acc = 0.0;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                for ci in 0..c {
                                    let xv = x[((bi * h + iy as usize) * wd + ix as usize) * c + ci];
                                    acc += xv * w[((ky * k + kx) * c + ci) * cout + o];
                                }
                            }
                        }
                        out[((bi * ho + oy) * wo + ox) * cout + o] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() -> Result<()> {
        for (k, stride) in [(3, 1), (3, 2), (1, 1)] {
            let mut store = ParamStore::new(3, DType::F64);
            let conv = Conv2d::new(&mut store, "c", 2, 3, k, stride)?;
            let x = Tensor::randn(0f64, 1.0, (2, 5, 4, 2), &Device::Cpu)?;
            let got = conv.forward(&x)?.flatten_all()?.to_vec1::<f64>()?;
            let w = store.get("c.weight").unwrap().flatten_all()?.to_vec1::<f64>()?;
            let want = naive_conv(&x.flatten_all()?.to_vec1::<f64>()?, x.dims4()?, &w, 3, k, stride);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        Ok(())
    }

    #[test]
    fn fully_masked_query_gives_zero() -> Result<()> {
        let dev = Device::Cpu;
        let q = Tensor::randn(0f32, 1.0, (2, 3, 4), &dev)?;
        let k = Tensor::randn(0f32, 1.0, (2, 5, 4), &dev)?;
        let mask = KeyMask(Tensor::from_vec(vec![1f32, 1., 0., 0., 0., 0., 0., 0., 0., 0.], (2, 5), &dev)?);
        let out = attention(&q, &k, &k, 2, false, Some(&mask))?;
        let second = out.get(1)?.abs()?.sum_all()?.to_scalar::<f32>()?;
        assert_eq!(second, 0.0);
        let first = out.get(0)?.abs()?.sum_all()?.to_scalar::<f32>()?;
        assert!(first > 0.0);
        Ok(())
    }

    #[test]
    fn masked_keys_do_not_contribute() -> Result<()> {
        let dev = Device::Cpu;
        let q = Tensor::randn(0f64, 1.0, (1, 2, 4), &dev)?;
        let k = Tensor::randn(0f64, 1.0, (1, 3, 4), &dev)?;
        let v = Tensor::randn(0f64, 1.0, (1, 3, 4), &dev)?;
        let mask = KeyMask(Tensor::from_vec(vec![1f64, 1., 0.], (1, 3), &dev)?);
        let masked = attention(&q, &k, &v, 1, false, Some(&mask))?;
        let trimmed = attention(&q, &k.narrow(1, 0, 2)?, &v.narrow(1, 0, 2)?, 1, false, None)?;
        let diff = (masked - trimmed)?.abs()?.max_keepdim(2)?.max_keepdim(1)?.flatten_all()?.to_vec1::<f64>()?;
        assert!(diff[0] < 1e-12);
        Ok(())
    }

    #[test]
    fn upsample_repeats_pixels() -> Result<()> {
        let x = Tensor::arange(0f32, 4.0, &Device::Cpu)?.reshape((1, 2, 2, 1))?;
        let y = upsample_nearest2x(&x)?.flatten_all()?.to_vec1::<f32>()?;
        assert_eq!(y, vec![0., 0., 1., 1., 0., 0., 1., 1., 2., 2., 3., 3., 2., 2., 3., 3.]);
        Ok(())
    }
}
