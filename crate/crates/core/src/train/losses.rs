use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::bridge::velocity_target;
use crate::net::abs0;
use crate::{Error, Result};

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!("shape mismatch {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b)?;
    Ok((a - b)?.sqr()?.mean_all()?)
}

pub fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b)?;
    Ok(abs0(&(a - b)?)?.mean_all()?)
}

/// MSE between `v_pred` and the bridge velocity target.
pub fn loss_latent(v_pred: &Tensor, z1: &Tensor, zt: &Tensor, t: f64, t_max: f64) -> Result<Tensor> {
    mse(v_pred, &velocity_target(z1, zt, t, t_max)?)
}

/// Forward differences along width and height of a `[..., H, W, C]` tensor.
fn image_grads(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let r = x.rank();
    if r < 3 {
        return Err(Error::invalid("images need at least H, W, C axes"));
    }
    let (ha, wa) = (r - 3, r - 2);
    let (h, w) = (x.dim(ha)?, x.dim(wa)?);
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!("image {h}x{w} too small for gradients")));
    }
    let dx = (x.narrow(wa, 1, w - 1)? - x.narrow(wa, 0, w - 1)?)?;
    let dy = (x.narrow(ha, 1, h - 1)? - x.narrow(ha, 0, h - 1)?)?;
    Ok((dx, dy))
}

/// `mean|∂x p − ∂x g| + mean|∂y p − ∂y g|` with forward differences.
pub fn loss_gradient(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    same_shape(pred, gt)?;
    let (px, py) = image_grads(pred)?;
    let (gx, gy) = image_grads(gt)?;
    Ok((l1(&px, &gx)? + l1(&py, &gy)?)?)
}

/// 2×2 average pooling over the H, W axes; odd trailing rows/cols are dropped.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let r = dims.len();
    let (h, w, c) = (dims[r - 3], dims[r - 2], dims[r - 1]);
    let lead: usize = dims[..r - 3].iter().product();
    let (h2, w2) = (h / 2, w / 2);
    let x = x.narrow(r - 3, 0, h2 * 2)?.narrow(r - 2, 0, w2 * 2)?;
    let y = x
        .reshape((lead, h2, 2, w2, 2, c))?
        .mean(4)?
        .mean(2)?;
    let mut out = dims;
    out[r - 3] = h2;
    out[r - 2] = w2;
    Ok(y.reshape(out)?)
}

/// Number of pyramid levels of the perceptual proxy.
pub const PROXY_SCALES: usize = 3;

/// Multi-scale structural stand-in for a learned perceptual metric: at full,
/// half and quarter resolution, gradient L1 plus intensity L1.
pub fn loss_perceptual_proxy(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    same_shape(pred, gt)?;
    let (mut p, mut g) = (pred.clone(), gt.clone());
    let mut total: Option<Tensor> = None;
    for s in 0..PROXY_SCALES {
        if s > 0 {
            p = avg_pool2(&p)?;
            g = avg_pool2(&g)?;
        }
        let r = p.rank();
        if p.dim(r - 3)? < 2 || p.dim(r - 2)? < 2 {
            break;
        }
        let term = (loss_gradient(&p, &g)? + l1(&p, &g)?)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::invalid("image too small for the perceptual proxy"))
}

/// Which pixel terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossTerms {
    pub perceptual: bool,
    pub gradient: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self {
            perceptual: true,
            gradient: true,
        }
    }
}

impl LossTerms {
    pub const LATENT_ONLY: LossTerms = LossTerms {
        perceptual: false,
        gradient: false,
    };
    pub const PERCEPTUAL: LossTerms = LossTerms {
        perceptual: true,
        gradient: false,
    };
    pub const FULL: LossTerms = LossTerms {
        perceptual: true,
        gradient: true,
    };
}

#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Tensor,
    pub latent: f64,
    pub pixel: f64,
}

/// `latent + λ·(proxy + gradient)`; `i_pred` is used unclamped.
pub fn loss_total(
    v_pred: &Tensor,
    v_target: &Tensor,
    i_pred: &Tensor,
    i_gt: &Tensor,
    lambda: f64,
    terms: LossTerms,
) -> Result<LossParts> {
    let latent = mse(v_pred, v_target)?;
    let mut pixel: Option<Tensor> = None;
    let mut add = |t: Tensor| -> Result<()> {
        pixel = Some(match pixel.take() {
            Some(p) => (p + t)?,
            None => t,
        });
        Ok(())
    };
    if lambda != 0.0 && terms.perceptual {
        add(loss_perceptual_proxy(i_pred, i_gt)?)?;
    }
    if lambda != 0.0 && terms.gradient {
        add(loss_gradient(i_pred, i_gt)?)?;
    }
    let latent_v = scalar(&latent)?;
    Ok(match pixel {
        Some(p) => LossParts {
            pixel: scalar(&p)?,
            latent: latent_v,
            total: (latent + p.affine(lambda, 0.0)?)?,
        },
        None => LossParts {
            total: latent,
            latent: latent_v,
            pixel: 0.0,
        },
    })
}
