use candle_core::Tensor;

use crate::{Error, Result};

/// Render tokens with their (frame, row, col) coordinates.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    /// `[B, F·Hp·Wp, dim]`.
    pub tokens: Tensor,
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.frames * self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major over (frame, row, col).
    pub fn positions(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.len());
        for f in 0..self.frames {
            for r in 0..self.rows {
                for c in 0..self.cols {
                    out.push((f, r, c));
                }
            }
        }
        out
    }
}

/// `[B, F, H, W, C] -> [B, F·Hp·Wp, p·p·C]`, tokens ordered (frame, row, col),
/// features ordered (dy, dx, channel).
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let (b, f, h, w, c) = x.dims5()?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::invalid(format!("patch {p} does not divide {h}x{w}")));
    }
    let (hp, wp) = (h / p, w / p);
    Ok(x.reshape((b * f, hp, p, wp, p, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, f * hp * wp, p * p * c))?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(x: &Tensor, frames: usize, h: usize, w: usize, p: usize) -> Result<Tensor> {
    let (b, n, d) = x.dims3()?;
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::invalid(format!("patch {p} does not divide {h}x{w}")));
    }
    let (hp, wp) = (h / p, w / p);
    if n != frames * hp * wp || d % (p * p) != 0 {
        return Err(Error::invalid(format!(
            "token shape {n}x{d} does not match {frames}x{h}x{w} with patch {p}"
        )));
    }
    let c = d / (p * p);
    Ok(x.reshape((b * frames, hp, wp, p, p, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, frames, h, w, c))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn ramp(shape: (usize, usize, usize, usize, usize)) -> Tensor {
        let n = shape.0 * shape.1 * shape.2 * shape.3 * shape.4;
        Tensor::arange(0f32, n as f32, &Device::Cpu).unwrap().reshape(shape).unwrap()
    }

    #[test]
    fn round_trip_and_count() {
        let x = ramp((1, 5, 64, 64, 3));
        let t = patchify(&x, 8).unwrap();
        assert_eq!(t.dims(), &[1, 320, 192]);
        let y = unpatchify(&t, 5, 64, 64, 8).unwrap();
        assert_eq!(y.dims(), x.dims());
        let d = (y - &x).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn token_holds_its_patch() {
        let x = ramp((1, 2, 4, 6, 1));
        let t = patchify(&x, 2).unwrap();
        // token (frame 1, row 1, col 2) -> index 1*6 + 1*3 + 2
        let tok: Vec<f32> = t.get(0).unwrap().get(11).unwrap().to_vec1().unwrap();
        let at = |f: usize, r: usize, c: usize| (f * 24 + r * 6 + c) as f32;
        assert_eq!(tok, vec![at(1, 2, 4), at(1, 2, 5), at(1, 3, 4), at(1, 3, 5)]);
    }

    #[test]
    fn swapping_patches_swaps_tokens() {
        let x = ramp((1, 1, 4, 4, 2));
        let mut v: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
        // swap patch (0,0) and (1,1) of size 2
        for dy in 0..2 {
            for dx in 0..2 {
                for c in 0..2 {
                    let a = (dy * 4 + dx) * 2 + c;
                    let b = ((2 + dy) * 4 + 2 + dx) * 2 + c;
                    v.swap(a, b);
                }
            }
        }
        let xs = Tensor::from_vec(v, (1, 1, 4, 4, 2), &Device::Cpu).unwrap();
        let t0: Vec<Vec<f32>> = patchify(&x, 2).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        let t1: Vec<Vec<f32>> = patchify(&xs, 2).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        assert_eq!(t0[0], t1[3]);
        assert_eq!(t0[3], t1[0]);
        assert_eq!(t0[1], t1[1]);
    }

    #[test]
    fn divisibility_checked() {
        let x = Tensor::zeros((1, 1, 10, 8, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(patchify(&x, 4).is_err());
        let grid = TokenGrid { tokens: x, frames: 2, rows: 2, cols: 3 };
        let pos = grid.positions();
        assert_eq!(pos.len(), 12);
        let set: std::collections::HashSet<_> = pos.iter().collect();
        assert_eq!(set.len(), 12);
    }
}
