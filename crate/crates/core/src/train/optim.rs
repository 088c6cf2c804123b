use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::net::{GroupMask, Param};
use crate::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with decoupled weight decay. Moment buffers are kept for every
/// parameter in store order; frozen parameters are never touched.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub weight_decay: f64,
    pub step: usize,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &[Param], weight_decay: f64) -> Result<Self> {
        let zeros = |p: &Param| p.var.as_tensor().zeros_like();
        Ok(Self {
            weight_decay,
            step: 0,
            m: params.iter().map(zeros).collect::<candle_core::Result<_>>()?,
            v: params.iter().map(zeros).collect::<candle_core::Result<_>>()?,
        })
    }

    /// Applies one update with learning rate `lr` to parameters in `trainable`.
    pub fn step(&mut self, params: &[Param], grads: &GradStore, lr: f64, trainable: GroupMask) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::invalid("optimizer state does not match parameter list"));
        }
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for (i, p) in params.iter().enumerate() {
            if !trainable.contains(p.group) {
                continue;
            }
            let Some(g) = grads.get(p.var.as_tensor()) else {
                continue;
            };
            let m = ((&self.m[i] * BETA1)? + (g * (1.0 - BETA1))?)?;
            let v = ((&self.v[i] * BETA2)? + (g.sqr()? * (1.0 - BETA2))?)?;
            let update = (m.affine(1.0 / bc1, 0.0)? / (v.affine(1.0 / bc2, 0.0)?.sqrt()? + ADAM_EPS)?)?;
            let theta = p.var.as_tensor();
            let next = ((theta * (1.0 - lr * self.weight_decay))? - (update * lr)?)?;
            p.var.set(&next)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}

/// Linear warmup from `lr / warmup` to `lr` over the first `warmup` steps.
pub fn warmup_lr(lr: f64, warmup: usize, step: usize) -> f64 {
    if warmup == 0 {
        lr
    } else {
        lr * ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{ParamGroup, ParamStore, Init};
    use candle_core::{DType, Device};

    fn store() -> ParamStore {
        let mut s = ParamStore::new(1, DType::F64, Device::Cpu);
        s.create("a".into(), ParamGroup::Base, &[3], Init::Normal(1.0)).unwrap();
        s.create("b".into(), ParamGroup::KeyframeAdapter, &[2], Init::Normal(1.0)).unwrap();
        s
    }

    fn loss(s: &ParamStore) -> Tensor {
        let a = s.params()[0].var.as_tensor().sqr().unwrap().sum_all().unwrap();
        let b = s.params()[1].var.as_tensor().sqr().unwrap().sum_all().unwrap();
        (a + b).unwrap()
    }

    fn values(s: &ParamStore) -> Vec<Vec<f64>> {
        s.params().iter().map(|p| p.var.as_tensor().to_vec1().unwrap()).collect()
    }

    #[test]
    fn zero_lr_keeps_params() {
        let s = store();
        let before = values(&s);
        let mut opt = AdamW::new(s.params(), 0.01).unwrap();
        let g = loss(&s).backward().unwrap();
        opt.step(s.params(), &g, 0.0, GroupMask::ALL).unwrap();
        assert_eq!(values(&s), before);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // after one step m̂ = g and v̂ = g², so the update is lr·g/(|g| + eps)
        let s = store();
        let before = values(&s);
        let mut opt = AdamW::new(s.params(), 0.01).unwrap();
        let g = loss(&s).backward().unwrap();
        opt.step(s.params(), &g, 0.1, GroupMask::of(&[ParamGroup::Base])).unwrap();
        let after = values(&s);
        for (x, y) in before[0].iter().zip(&after[0]) {
            let grad = 2.0 * x;
            let want = x * (1.0 - 0.1 * 0.01) - 0.1 * grad / (grad.abs() + ADAM_EPS);
            assert!((y - want).abs() < 1e-12);
        }
        assert_eq!(before[1], after[1]);
    }

    #[test]
    fn warmup_ramp() {
        assert_eq!(warmup_lr(1.0, 0, 0), 1.0);
        assert!((warmup_lr(1.0, 4, 0) - 0.25).abs() < 1e-15);
        assert_eq!(warmup_lr(1.0, 4, 3), 1.0);
        assert_eq!(warmup_lr(1.0, 4, 100), 1.0);
    }
}
