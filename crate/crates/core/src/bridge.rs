//! Brownian-bridge interpolants between an albedo clip (`t = 0`) and a
//! rendered clip (`t = 1`), their velocity targets, and the update rules
//! used at inference.
//!
//! All functions are element-wise over tensors of any shape and dtype.
//! Randomness is always passed in explicitly.

use candle_core::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_SIGMA: f64 = 0.005;
pub const DEFAULT_T_MAX: f64 = 0.9999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `t ~ U[0, t_max]`.
    Uniform,
    /// `t` drawn uniformly from `t_grid`.
    Discrete4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeConfig {
    pub sigma: f64,
    pub schedule: Schedule,
    pub t_grid: Vec<f64>,
    pub t_max: f64,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            schedule: Schedule::Discrete4,
            t_grid: vec![0.0, 0.25, 0.5, 0.75],
            t_max: DEFAULT_T_MAX,
        }
    }
}

impl BridgeConfig {
    /// Returns the offending field name and reason on failure.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(("sigma", format!("must be >= 0, got {}", self.sigma)));
        }
        if !(self.t_max > 0.0 && self.t_max < 1.0) {
            return Err(("t_max", format!("must lie in (0, 1), got {}", self.t_max)));
        }
        if self.t_grid.is_empty() {
            return Err(("t_grid", "must not be empty".into()));
        }
        if self.t_grid.iter().any(|t| !(0.0..=self.t_max).contains(t)) {
            return Err(("t_grid", format!("entries must lie in [0, {}]", self.t_max)));
        }
        if self.t_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(("t_grid", "must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|(field, reason)| Error::invalid(format!("bridge.{field}: {reason}")))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Standard normal noise shaped like `like`.
pub fn standard_normal_like<R: Rng + ?Sized>(like: &Tensor, rng: &mut R) -> Result<Tensor> {
    let n = like.elem_count();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, like.shape(), like.device())?.to_dtype(like.dtype())?)
}

/// `zt = (1-t) z0 + t z1 + sigma sqrt(t(1-t)) eps`.
pub fn interpolate(z0: &Tensor, z1: &Tensor, t: f64, sigma: f64, eps: &Tensor) -> Result<Tensor> {
    same_shape(z0, z1, "interpolate")?;
    same_shape(z0, eps, "interpolate")?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("interpolate: t = {t} outside [0, 1]")));
    }
    let mean = (z0.affine(1.0 - t, 0.0)? + z1.affine(t, 0.0)?)?;
    let std = sigma * (t * (1.0 - t)).sqrt();
    if std == 0.0 {
        return Ok(mean);
    }
    Ok((mean + eps.affine(std, 0.0)?)?)
}

/// Bridge drift `(z1 - zt) / (1 - t)`; rejects `t > t_max`.
pub fn velocity_target(z1: &Tensor, zt: &Tensor, t: f64, t_max: f64) -> Result<Tensor> {
    same_shape(z1, zt, "velocity_target")?;
    if !(0.0..=t_max).contains(&t) {
        return Err(Error::invalid(format!("velocity_target: t = {t} outside [0, {t_max}]")));
    }
    Ok((z1 - zt)?.affine(1.0 / (1.0 - t), 0.0)?)
}

/// Single-step endpoint estimate `zt + v (1 - t)`.
pub fn recover_endpoint(zt: &Tensor, v: &Tensor, t: f64) -> Result<Tensor> {
    same_shape(zt, v, "recover_endpoint")?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("recover_endpoint: t = {t} outside [0, 1]")));
    }
    Ok((zt + v.affine(1.0 - t, 0.0)?)?)
}

pub fn sample_timestep<R: Rng + ?Sized>(cfg: &BridgeConfig, rng: &mut R) -> f64 {
    match cfg.schedule {
        Schedule::Uniform => rng.random_range(0.0..=cfg.t_max),
        Schedule::Discrete4 => cfg.t_grid[rng.random_range(0..cfg.t_grid.len())],
    }
}

/// Euler step of the probability-flow ODE.
pub fn ode_step(zt: &Tensor, v: &Tensor, t: f64, dt: f64) -> Result<Tensor> {
    same_shape(zt, v, "ode_step")?;
    if t + dt > 1.0 + 1e-12 || dt < 0.0 {
        return Err(Error::invalid(format!("ode_step: t + dt = {} beyond 1", t + dt)));
    }
    Ok((zt + v.affine(dt, 0.0)?)?)
}

/// Predict-then-renoise bridge step from `t` to `t_next`.
///
/// The mean moves along the predicted straight path, `zt + v (t_next - t)`,
/// which equals re-interpolating between the implied source and the
/// recovered endpoint; fresh noise with variance `sigma² t_next (1 - t_next)`
/// is added. At `t_next = 1` the recovered endpoint is returned.
pub fn sde_step<R: Rng + ?Sized>(
    zt: &Tensor,
    v: &Tensor,
    t: f64,
    t_next: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<Tensor> {
    same_shape(zt, v, "sde_step")?;
    if !(t < t_next && t_next <= 1.0) || t < 0.0 {
        return Err(Error::invalid(format!("sde_step: need 0 <= t < t_next <= 1, got {t} -> {t_next}")));
    }
    if t_next == 1.0 {
        return recover_endpoint(zt, v, t);
    }
    let mean = (zt + v.affine(t_next - t, 0.0)?)?;
    let std = sigma * (t_next * (1.0 - t_next)).sqrt();
    if std == 0.0 {
        return Ok(mean);
    }
    let eps = standard_normal_like(zt, rng)?;
    Ok((mean + eps.affine(std, 0.0)?)?)
}

/// One bridge sample; `zt` always satisfies the interpolation identity for
/// the stored fields.
#[derive(Debug, Clone)]
pub struct BridgeState {
    pub z0: Tensor,
    pub z1: Tensor,
    pub t: f64,
    pub sigma: f64,
    pub eps: Tensor,
    pub zt: Tensor,
}

impl BridgeState {
    pub fn new(z0: Tensor, z1: Tensor, t: f64, sigma: f64, eps: Tensor) -> Result<Self> {
        let zt = interpolate(&z0, &z1, t, sigma, &eps)?;
        Ok(Self {
            z0,
            z1,
            t,
            sigma,
            eps,
            zt,
        })
    }

    pub fn sample<R: Rng + ?Sized>(
        z0: Tensor,
        z1: Tensor,
        cfg: &BridgeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let t = sample_timestep(cfg, rng);
        let eps = standard_normal_like(&z0, rng)?;
        Self::new(z0, z1, t, cfg.sigma, eps)
    }

    pub fn velocity_target(&self, t_max: f64) -> Result<Tensor> {
        velocity_target(&self.z1, &self.zt, self.t, t_max)
    }
}
