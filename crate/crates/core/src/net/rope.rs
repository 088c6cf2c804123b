use candle_core::{DType, Device, Tensor};

use crate::{Error, Result};

pub const ROPE_BASE: f64 = 10000.0;

/// Rotates consecutive pairs `(x[2j], x[2j+1])` of each row by
/// `position · base^(-2j/d)`.
pub fn rope_apply(vectors: &[Vec<f64>], positions: &[usize]) -> Result<Vec<Vec<f64>>> {
    if vectors.len() != positions.len() {
        return Err(Error::invalid("one position per vector is required"));
    }
    vectors
        .iter()
        .zip(positions)
        .map(|(v, &p)| {
            let d = v.len();
            if d % 2 != 0 {
                return Err(Error::invalid(format!("rope needs an even head_dim, got {d}")));
            }
            let mut out = vec![0.0; d];
            for j in 0..d / 2 {
                let theta = ROPE_BASE.powf(-2.0 * j as f64 / d as f64);
                let (s, c) = (p as f64 * theta).sin_cos();
                out[2 * j] = v[2 * j] * c - v[2 * j + 1] * s;
                out[2 * j + 1] = v[2 * j] * s + v[2 * j + 1] * c;
            }
            Ok(out)
        })
        .collect()
}

/// Cosine/sine tables shaped `[B, 1, N, hd/2]` for per-batch positions.
pub(crate) struct RopeTable {
    cos: Tensor,
    sin: Tensor,
}

impl RopeTable {
    pub fn new(positions: &[Vec<usize>], head_dim: usize, dtype: DType, device: &Device) -> Result<Self> {
        if !head_dim.is_multiple_of(2) {
            return Err(Error::invalid(format!("rope needs an even head_dim, got {head_dim}")));
        }
        let half = head_dim / 2;
        let b = positions.len();
        let n = positions.first().map_or(0, Vec::len);
        if positions.iter().any(|p| p.len() != n) {
            return Err(Error::invalid("ragged rope positions"));
        }
        let mut cos = Vec::with_capacity(b * n * half);
        let mut sin = Vec::with_capacity(b * n * half);
        for row in positions {
            for &p in row {
                for j in 0..half {
                    let theta = ROPE_BASE.powf(-2.0 * j as f64 / head_dim as f64);
                    let (s, c) = (p as f64 * theta).sin_cos();
                    cos.push(c);
                    sin.push(s);
                }
            }
        }
        let shape = (b, 1, n, half);
        Ok(Self {
            cos: Tensor::from_vec(cos, shape, device)?.to_dtype(dtype)?,
            sin: Tensor::from_vec(sin, shape, device)?.to_dtype(dtype)?,
        })
    }

    /// Applies to `[B, heads, N, hd]`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, n, hd) = x.dims4()?;
        let pairs = x.reshape((b, h, n, hd / 2, 2))?;
        let x0 = pairs.narrow(4, 0, 1)?.squeeze(4)?;
        let x1 = pairs.narrow(4, 1, 1)?.squeeze(4)?;
        let o0 = (x0.broadcast_mul(&self.cos)? - x1.broadcast_mul(&self.sin)?)?;
        let o1 = (x0.broadcast_mul(&self.sin)? + x1.broadcast_mul(&self.cos)?)?;
        Ok(Tensor::stack(&[o0, o1], 4)?.reshape((b, h, n, hd))?)
    }
}

/// Tensor form of [`rope_apply`] for `[N, d]` inputs.
pub fn rope_tensor(x: &Tensor, positions: &[usize]) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    if positions.len() != n {
        return Err(Error::invalid("one position per vector is required"));
    }
    let table = RopeTable::new(&[positions.to_vec()], d, x.dtype(), x.device())?;
    Ok(table.apply(&x.reshape((1, 1, n, d))?)?.reshape((n, d))?)
}
