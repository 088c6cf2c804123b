use candle_core::{Tensor, D};

use super::params::{Builder, GroupMask, Init, Param};
use crate::Result;

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(Self {
            weight: s.param("weight", &[fan_out, fan_in], Init::Xavier { fan_in, fan_out })?,
            bias: Some(s.param("bias", &[fan_out], Init::Zeros)?),
        })
    }

    pub fn zeros(b: &mut Builder, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(Self {
            weight: s.param("weight", &[fan_out, fan_in], Init::Zeros)?,
            bias: Some(s.param("bias", &[fan_out], Init::Zeros)?),
        })
    }

    pub fn forward(&self, x: &Tensor, mask: GroupMask) -> Result<Tensor> {
        let w = self.weight.get(mask);
        let dims = x.dims().to_vec();
        let fan_in = *dims.last().expect("linear input has a feature axis");
        let rows = x.elem_count() / fan_in;
        let y = x.reshape((rows, fan_in))?.matmul(&w.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(&b.get(mask))?,
            None => y,
        };
        let mut out = dims;
        *out.last_mut().unwrap() = w.dim(0)?;
        Ok(y.reshape(out)?)
    }
}

/// Low-rank update `(alpha / r) B A x` with `B` zero-initialised and
/// `alpha = r`.
#[derive(Debug, Clone)]
pub struct Lora {
    pub down: Param,
    pub up: Param,
    pub scale: f64,
}

impl Lora {
    pub fn new(b: &mut Builder, name: &str, fan_in: usize, fan_out: usize, rank: usize) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(Self {
            down: s.param("a", &[rank, fan_in], Init::Normal(1.0 / (fan_in as f64).sqrt()))?,
            up: s.param("b", &[fan_out, rank], Init::Zeros)?,
            scale: 1.0,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: GroupMask) -> Result<Tensor> {
        let a = self.down.get(mask);
        let b = self.up.get(mask);
        let dims = x.dims().to_vec();
        let fan_in = *dims.last().unwrap();
        let rows = x.elem_count() / fan_in;
        let y = x
            .reshape((rows, fan_in))?
            .matmul(&a.t()?)?
            .matmul(&b.t()?)?
            .affine(self.scale, 0.0)?;
        let mut out = dims;
        *out.last_mut().unwrap() = b.dim(0)?;
        Ok(y.reshape(out)?)
    }
}

/// Layer norm over the last axis, no affine parameters.
pub fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(xc.broadcast_div(&(var + LN_EPS)?.sqrt()?)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?;
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// `[B, N, heads·hd] -> [B, heads, N, hd]`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, d) = x.dims3()?;
    Ok(x.reshape((b, n, heads, d / heads))?.transpose(1, 2)?.contiguous()?)
}

pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, n, hd) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, n, h * hd))?)
}

/// Scaled dot-product attention over `[B, heads, N, hd]` tensors.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let hd = q.dim(D::Minus1)?;
    let scores = q.matmul(&k.t()?.contiguous()?)?.affine(1.0 / (hd as f64).sqrt(), 0.0)?;
    Ok(softmax_last(&scores)?.matmul(v)?)
}

/// `|x|` whose derivative at zero is zero (candle's `abs` uses +1 there).
pub fn abs0(x: &Tensor) -> Result<Tensor> {
    Ok(x.mul(&x.sign()?.detach())?)
}
