//! Small transformer building blocks on top of candle tensors.

use candle_core::{Tensor, D};

use crate::error::Result;
use crate::params::{Init, Scope, ONES, ZEROS};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(s: &mut Scope<'_>, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        Self::with_init(s, in_dim, out_dim, bias, Init::TruncNormal(INIT_STD))
    }

    pub fn with_init(s: &mut Scope<'_>, in_dim: usize, out_dim: usize, bias: bool, init: Init) -> Result<Self> {
        let weight = s.param("weight", &[out_dim, in_dim], init)?;
        let bias = if bias {
            Some(s.param("bias", &[out_dim], ZEROS)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Applies to the last dimension of a tensor of any rank.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().expect("linear input has no dimensions");
        let rows = x.elem_count() / in_dim;
        let mut y = x.reshape((rows, in_dim))?.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(s: &mut Scope<'_>, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: s.param("weight", &[dim], ONES)?,
            beta: s.param("bias", &[dim], ZEROS)?,
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

/// Softmax over the last dimension with the row max shifted out.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

#[derive(Debug, Clone)]
pub struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(s: &mut Scope<'_>, dim: usize, heads: usize) -> Result<Self> {
        assert!(
            heads > 0 && dim.is_multiple_of(heads),
            "dim {dim} not divisible by {heads} heads"
        );
        Ok(Self {
            qkv: Linear::new(&mut s.sub("qkv"), dim, 3 * dim, true)?,
            proj: Linear::new(&mut s.sub("proj"), dim, dim, true)?,
            heads,
        })
    }

    /// Full self-attention within each sequence of `x: (B, T, C)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, t, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?
            .contiguous()?;
        let q = qkv.get(0)?;
        let k = qkv.get(1)?;
        let v = qkv.get(2)?;
        let scale = 1.0 / (hd as f64).sqrt();
        let att = (q.matmul(&k.t()?)? * scale)?;
        let att = softmax_last_dim(&att)?;
        let y = att.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, t, c))?;
        self.proj.forward(&y)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(s: &mut Scope<'_>, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut s.sub("fc1"), dim, hidden, true)?,
            fc2: Linear::new(&mut s.sub("fc2"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    pub fn new(s: &mut Scope<'_>, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&mut s.sub("norm1"), dim)?,
            attn: Attention::new(&mut s.sub("attn"), dim, heads)?,
            norm2: LayerNorm::new(&mut s.sub("norm2"), dim)?,
            mlp: Mlp::new(&mut s.sub("mlp"), dim, dim * mlp_ratio)?,
        })
    }

    /// `attend` maps normalized tokens to attention output; it lets callers
    /// regroup tokens into windows around the shared attention weights.
    pub fn forward_with<F>(&self, x: &Tensor, attend: F) -> Result<Tensor>
    where
        F: Fn(&Attention, &Tensor) -> Result<Tensor>,
    {
        let x = (x + attend(&self.attn, &self.norm1.forward(x)?)?)?;
        let y = self.mlp.forward(&self.norm2.forward(&x)?)?;
        Ok((x + y)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with(x, |attn, h| attn.forward(h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::DType;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(
            &[[1000.0f64, 1001.0, 999.0], [0.0, 0.0, 0.0]],
            &candle_core::Device::Cpu,
        )
        .unwrap();
        let s = softmax_last_dim(&x).unwrap().to_vec2::<f64>().unwrap();
        for row in s {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ln = LayerNorm::new(&mut store.scope(&mut rng), 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 10.0]], &candle_core::Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn attention_preserves_shape() {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let blk = Block::new(&mut store.scope(&mut rng), 8, 2, 4).unwrap();
        let x = Tensor::ones((3, 5, 8), DType::F32, &candle_core::Device::Cpu).unwrap();
        assert_eq!(blk.forward(&x).unwrap().dims(), &[3, 5, 8]);
    }
}
