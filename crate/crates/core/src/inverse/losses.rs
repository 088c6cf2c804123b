use candle_core::{DType, Tensor, D};

use crate::net::abs0;
use crate::train::{l1, loss_perceptual_proxy};
use crate::{Error, Result};

pub const COSINE_EPS: f64 = 1e-8;
pub const DEPTH_EPS: f64 = 1e-6;
/// Coefficient of the squared-mean term of the log-depth loss.
pub const DEFAULT_SSI_LAMBDA: f64 = 0.5;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!("shape mismatch {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `mean|p − g| + λ·proxy(p, g)`.
pub fn loss_albedo(pred: &Tensor, gt: &Tensor, lambda: f64) -> Result<Tensor> {
    same_shape(pred, gt)?;
    let base = l1(pred, gt)?;
    if lambda == 0.0 {
        return Ok(base);
    }
    Ok((base + loss_perceptual_proxy(pred, gt)?.affine(lambda, 0.0)?)?)
}

/// `1 − mean cos(p, g)` over pixels with `mask = 1`. Inputs are decoded
/// vectors `[..., 3]`, the mask is `[..., 1]`.
pub fn loss_normal(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<Tensor> {
    same_shape(pred, gt)?;
    let dot = (pred * gt)?.sum_keepdim(D::Minus1)?;
    let np = pred.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let ng = gt.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let cos = (dot / ((np * ng)? + COSINE_EPS)?)?;
    let n = mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if n == 0.0 {
        return Ok(cos.sum_all()?.affine(0.0, 0.0)?);
    }
    let mean = (cos * mask)?.sum_all()?.affine(1.0 / n, 0.0)?;
    Ok(mean.affine(-1.0, 1.0)?)
}

/// `(1/N)ΣΔ² − (λ/N²)(ΣΔ)²` over masked pixels, with `Δ` given directly.
pub fn ssi_from_delta(delta: &Tensor, mask: &Tensor, lambda: f64) -> Result<Tensor> {
    same_shape(delta, mask)?;
    let n = mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if n == 0.0 {
        return Ok(delta.sum_all()?.affine(0.0, 0.0)?);
    }
    let d = (delta * mask)?;
    let sq = d.sqr()?.sum_all()?.affine(1.0 / n, 0.0)?;
    let s = d.sum_all()?;
    Ok((sq - s.sqr()?.affine(lambda / (n * n), 0.0)?)?)
}

/// Log-depth loss on depths already in log space.
pub fn loss_depth_ssi_log(pred_log: &Tensor, gt_log: &Tensor, mask: &Tensor, lambda: f64) -> Result<Tensor> {
    same_shape(pred_log, gt_log)?;
    ssi_from_delta(&(pred_log - gt_log)?, mask, lambda)
}

/// Log-depth loss on positive depths, `Δ = log(p + ε) − log(g + ε)`.
pub fn loss_depth_ssi(pred: &Tensor, gt: &Tensor, mask: &Tensor, lambda: f64) -> Result<Tensor> {
    same_shape(pred, gt)?;
    for (name, t) in [("prediction", pred), ("target", gt)] {
        let min = (t + DEPTH_EPS)?.min_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !(min > 0.0) {
            return Err(Error::invalid(format!("depth {name} is non-positive after the epsilon guard")));
        }
    }
    loss_depth_ssi_log(&(pred + DEPTH_EPS)?.log()?, &(gt + DEPTH_EPS)?.log()?, mask, lambda)
}

/// `mean|p − g|` with subgradient 0 at equality.
pub fn loss_material(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    same_shape(pred, gt)?;
    Ok(abs0(&(pred - gt)?)?.mean_all()?)
}
