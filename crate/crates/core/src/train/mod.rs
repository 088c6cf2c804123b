//! Losses, optimizer, checkpoints and the two forward training stages.

mod checkpoint;
mod losses;
mod optim;

pub use checkpoint::{
    sha256_hex, Checkpoint, CheckpointHeader, InverseMeta, ManifestEntry, OptimizerMeta, Stage, MAGIC, VERSION,
};
pub use losses::{
    avg_pool2, l1, loss_gradient, loss_latent, loss_perceptual_proxy, loss_total, mse, LossParts, LossTerms,
    PROXY_SCALES,
};
pub use optim::{warmup_lr, AdamW, ADAM_EPS, BETA1, BETA2};

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::{
    interpolate, recover_endpoint, sample_timestep, standard_normal_like, velocity_target, BridgeConfig,
};
use crate::clip::{reference_frames, Clip};
use crate::net::{Conditioning, GroupMask, Keyframes, NetConfig, ParamGroup, RefClip, RenderNet};
use crate::scene::Sequence;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Stage-1 step count.
    pub steps: usize,
    /// Stage-2 step count.
    pub keyframe_steps: usize,
    pub batch: usize,
    pub lambda_pixel: f64,
    pub clip_frames: usize,
    pub seed: u64,
    pub keyframe_gap: usize,
    pub weight_decay: f64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Probability of conditioning on the clip's first reference frame.
    pub ref_clip_prob: f64,
    pub loss: LossTerms,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Base,
            lr: 1e-4,
            warmup_steps: 100,
            steps: 3000,
            keyframe_steps: 1000,
            batch: 4,
            lambda_pixel: 1.0,
            clip_frames: 5,
            seed: 0,
            keyframe_gap: 16,
            weight_decay: 0.01,
            checkpoint_every: 500,
            ref_clip_prob: 0.5,
            loss: LossTerms::default(),
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.stage == Stage::Inverse {
            return Err(("stage", "must be `base` or `keyframe`".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(("lr", format!("must be > 0, got {}", self.lr)));
        }
        if self.steps == 0 {
            return Err(("steps", "must be > 0".into()));
        }
        if self.keyframe_steps == 0 {
            return Err(("keyframe_steps", "must be > 0".into()));
        }
        if self.batch == 0 {
            return Err(("batch", "must be > 0".into()));
        }
        if self.clip_frames == 0 {
            return Err(("clip_frames", "must be >= 1".into()));
        }
        if self.keyframe_gap == 0 {
            return Err(("keyframe_gap", "must be >= 1".into()));
        }
        if !(self.lambda_pixel >= 0.0) {
            return Err(("lambda_pixel", "must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.ref_clip_prob) {
            return Err(("ref_clip_prob", "must lie in [0, 1]".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(("weight_decay", "must be >= 0".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|(f, r)| Error::invalid(format!("train.{f}: {r}")))
    }

    pub fn total_steps(&self) -> usize {
        match self.stage {
            Stage::Keyframe => self.keyframe_steps,
            _ => self.steps,
        }
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss_latent: f64,
    pub loss_pixel: f64,
    pub lr: f64,
    pub wallclock: f64,
}

/// Fully sampled inputs of one optimisation step.
#[derive(Debug, Clone)]
pub struct StepInputs {
    pub z0: Tensor,
    pub z1: Tensor,
    pub zt: Tensor,
    pub t: Vec<f64>,
    pub cond: Conditioning,
    pub use_keyframes: bool,
}

/// `loss_total` for a batch, with per-item velocity targets and endpoints.
pub fn compute_loss(
    net: &RenderNet,
    inputs: &StepInputs,
    bridge: &BridgeConfig,
    lambda: f64,
    terms: LossTerms,
) -> Result<LossParts> {
    let v = net.forward(&inputs.zt, &inputs.t, &inputs.cond, inputs.use_keyframes)?;
    let mut targets = Vec::with_capacity(inputs.t.len());
    let mut preds = Vec::with_capacity(inputs.t.len());
    for (i, &t) in inputs.t.iter().enumerate() {
        let zt = inputs.zt.narrow(0, i, 1)?;
        targets.push(velocity_target(&inputs.z1.narrow(0, i, 1)?, &zt, t, bridge.t_max)?);
        preds.push(recover_endpoint(&zt, &v.narrow(0, i, 1)?, t)?);
    }
    let target = Tensor::cat(&targets, 0)?;
    let i_pred = Tensor::cat(&preds, 0)?;
    loss_total(&v, &target, &i_pred, &inputs.z1, lambda, terms)
}

/// Keyframe indices `0, gap, 2·gap, …` below `len`.
pub fn keyframe_indices(len: usize, gap: usize) -> Vec<usize> {
    (0..len).step_by(gap.max(1)).collect()
}

/// Reference clip holding the first `n` frames of `images` under mask 1.
pub fn leading_ref_clip(images: &Tensor, n: &[usize]) -> Result<RefClip> {
    let (b, f, h, w, _) = images.dims5()?;
    let mut mask = vec![0f32; b * f * h * w];
    for (bi, &k) in n.iter().enumerate() {
        let k = k.min(f);
        let start = bi * f * h * w;
        mask[start..start + k * h * w].fill(1.0);
    }
    let mask = Tensor::from_vec(mask, (b, f, h, w, 1), images.device())?.to_dtype(images.dtype())?;
    Ok(RefClip {
        images: images.broadcast_mul(&mask)?,
        mask,
    })
}

pub struct Trainer {
    pub net: RenderNet,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    pub bridge: BridgeConfig,
    pub step: usize,
    pub history: Vec<LogRecord>,
    /// Hash of the stage-1 checkpoint a stage-2 run started from.
    pub parent_hash: Option<String>,
    elapsed: f64,
}

fn trainable_for(stage: Stage) -> GroupMask {
    match stage {
        Stage::Keyframe => GroupMask::of(&[ParamGroup::KeyframeAdapter]),
        _ => GroupMask::of(&[ParamGroup::Base, ParamGroup::EnvmapAdapter]),
    }
}

impl Trainer {
    /// Fresh stage-1 trainer.
    pub fn new(net_cfg: NetConfig, cfg: TrainConfig, bridge: BridgeConfig) -> Result<Self> {
        cfg.validate()?;
        bridge.validate()?;
        if cfg.stage != Stage::Base {
            return Err(Error::invalid("train.stage: a fresh network needs stage `base`"));
        }
        let mut net = RenderNet::new(net_cfg, DType::F32, &Device::Cpu)?;
        net.set_trainable(trainable_for(Stage::Base));
        let opt = AdamW::new(net.params(), cfg.weight_decay)?;
        Ok(Self {
            net,
            opt,
            cfg,
            bridge,
            step: 0,
            history: Vec::new(),
            parent_hash: None,
            elapsed: 0.0,
        })
    }

    /// Stage-2 trainer on top of a stage-1 checkpoint; base and envmap groups are frozen.
    pub fn keyframe_stage(base: &Checkpoint, base_hash: &str, mut cfg: TrainConfig) -> Result<Self> {
        if base.header.stage != Stage::Base {
            return Err(Error::Unsupported(format!(
                "keyframe training needs a base checkpoint, got stage `{}`",
                base.header.stage
            )));
        }
        cfg.stage = Stage::Keyframe;
        cfg.validate()?;
        let mut net = base.build_net(DType::F32, &Device::Cpu)?;
        net.set_trainable(trainable_for(Stage::Keyframe));
        let opt = AdamW::new(net.params(), cfg.weight_decay)?;
        Ok(Self {
            net,
            opt,
            cfg,
            bridge: base.header.bridge.clone(),
            step: 0,
            history: Vec::new(),
            parent_hash: Some(base_hash.to_string()),
            elapsed: 0.0,
        })
    }

    /// Continues a run from one of its own checkpoints.
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_value(ck.header.train["config"].clone())
            .map_err(|e| Error::invalid(format!("checkpoint has no usable train config: {e}")))?;
        if cfg.stage != ck.header.stage {
            return Err(Error::invalid("checkpoint stage disagrees with its train config"));
        }
        let mut net = ck.build_net(DType::F32, &Device::Cpu)?;
        net.set_trainable(trainable_for(cfg.stage));
        let opt = match ck.optimizer(&net)? {
            Some(o) => o,
            None => return Err(Error::invalid("checkpoint has no optimizer state to resume from")),
        };
        let parent_hash = ck.header.train["parent_hash"].as_str().map(str::to_string);
        Ok(Self {
            net,
            opt,
            cfg,
            bridge: ck.header.bridge.clone(),
            step: ck.header.step,
            history: Vec::new(),
            parent_hash,
            elapsed: 0.0,
        })
    }

    pub fn stage(&self) -> Stage {
        self.cfg.stage
    }

    fn step_rng(&self, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step as u64);
        rng
    }

    /// Samples the batch of `step`; depends only on (seed, step, data).
    pub fn sample_inputs(&self, data: &[&Sequence], step: usize) -> Result<StepInputs> {
        if data.is_empty() {
            return Err(Error::invalid("training split is empty"));
        }
        let f = self.cfg.clip_frames;
        if let Some(s) = data.iter().find(|s| s.len() < f) {
            return Err(Error::invalid(format!(
                "sequence {} has {} frames, fewer than clip_frames {f}",
                s.seed,
                s.len()
            )));
        }
        let keyframes = self.stage() == Stage::Keyframe;
        let mut rng = self.step_rng(step);
        let (dtype, dev) = (self.net.dtype(), self.net.device().clone());
        let mut clips = Vec::new();
        let mut zts = Vec::new();
        let mut ts = Vec::new();
        let mut refs = Vec::new();
        let mut parents = Vec::new();
        for _ in 0..self.cfg.batch {
            let seq = data[rng.random_range(0..data.len())];
            let start = rng.random_range(0..=seq.len() - f);
            let clip = Clip::window(seq, start, f, dtype, &dev)?;
            let t = sample_timestep(&self.bridge, &mut rng);
            let eps = standard_normal_like(&clip.albedo, &mut rng)?;
            zts.push(interpolate(&clip.albedo, &clip.reference, t, self.bridge.sigma, &eps)?);
            ts.push(t);
            refs.push(usize::from(rng.random_bool(self.cfg.ref_clip_prob)));
            parents.push(seq);
            clips.push(clip);
        }
        let clip = Clip::cat(&clips)?;
        let kf = if keyframes {
            let k = parents
                .iter()
                .map(|s| keyframe_indices(s.len(), self.cfg.keyframe_gap).len())
                .min()
                .unwrap_or(0);
            let mut images = Vec::new();
            let mut index = Vec::new();
            for s in &parents {
                let idx: Vec<usize> = keyframe_indices(s.len(), self.cfg.keyframe_gap).into_iter().take(k).collect();
                images.push(reference_frames(s, &idx, dtype, &dev)?);
                index.push(idx);
            }
            Some(Keyframes {
                images: Tensor::cat(&images, 0)?,
                index,
            })
        } else {
            None
        };
        Ok(StepInputs {
            z0: clip.albedo.clone(),
            zt: Tensor::cat(&zts, 0)?,
            t: ts,
            cond: Conditioning {
                attributes: clip.attributes.clone(),
                env_ldr: clip.env_ldr.clone(),
                frame_index: clip.frame_index.clone(),
                ref_clip: Some(leading_ref_clip(&clip.reference, &refs)?),
                keyframes: kf,
            },
            z1: clip.reference,
            use_keyframes: keyframes,
        })
    }

    /// One optimisation step.
    pub fn train_step(&mut self, data: &[&Sequence]) -> Result<LogRecord> {
        let clock = Instant::now();
        let inputs = self.sample_inputs(data, self.step)?;
        let parts = compute_loss(&self.net, &inputs, &self.bridge, self.cfg.lambda_pixel, self.cfg.loss)?;
        let total = parts.total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!("latent {} pixel {} t {:?}", parts.latent, parts.pixel, inputs.t),
            });
        }
        let grads = parts.total.backward()?;
        let lr = warmup_lr(self.cfg.lr, self.cfg.warmup_steps, self.step);
        self.opt.step(self.net.params(), &grads, lr, self.net.trainable())?;
        self.step += 1;
        self.elapsed += clock.elapsed().as_secs_f64();
        let rec = LogRecord {
            step: self.step,
            loss_latent: parts.latent,
            loss_pixel: parts.pixel,
            lr,
            wallclock: self.elapsed,
        };
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Trains until `self.step == until`, appending log lines to `log` and
    /// writing `ckpt_dir/step_{n}.rfck` every `checkpoint_every` steps.
    pub fn run(
        &mut self,
        data: &[&Sequence],
        until: usize,
        mut log: Option<&mut dyn Write>,
        ckpt_dir: Option<&Path>,
    ) -> Result<()> {
        while self.step < until {
            let rec = self.train_step(data)?;
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&rec)?;
                writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
            }
            if let Some(dir) = ckpt_dir {
                let every = self.cfg.checkpoint_every;
                if (every > 0 && self.step.is_multiple_of(every)) || self.step == until {
                    self.checkpoint()?.save(&dir.join(format!("step_{:06}.rfck", self.step)))?;
                }
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let train = serde_json::json!({
            "config": self.cfg,
            "parent_hash": self.parent_hash,
        });
        Checkpoint::capture(
            &self.net,
            GroupMask::of(&[ParamGroup::Base, ParamGroup::EnvmapAdapter, ParamGroup::KeyframeAdapter]),
            self.stage(),
            self.step,
            &self.bridge,
            train,
            None,
            Some(&self.opt),
        )
    }
}

/// Exponential moving average of a loss series, for smoke checks.
pub fn smoothed(values: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = None;
    for &v in values {
        let next = match acc {
            None => v,
            Some(a) => alpha * v + (1.0 - alpha) * a,
        };
        acc = Some(next);
        out.push(next);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{synth_sequence, SynthConfig};

    pub(crate) fn tiny_net() -> NetConfig {
        NetConfig {
            patch: 4,
            dim: 16,
            depth: 1,
            heads: 2,
            ffn_mult: 2.0,
            height: 16,
            width: 16,
            env_height: 8,
            env_width: 16,
            env_patch: 4,
            ..Default::default()
        }
    }

    fn data(frames: usize) -> Vec<Sequence> {
        let cfg = SynthConfig {
            frames,
            height: 16,
            width: 16,
            env_height: 8,
            env_width: 16,
            ..Default::default()
        };
        (0..2).map(|i| synth_sequence(i, &cfg).unwrap()).collect()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            steps: 6,
            batch: 2,
            clip_frames: 2,
            lr: 1e-3,
            warmup_steps: 2,
            checkpoint_every: 0,
            ..Default::default()
        }
    }

    #[test]
    fn config_invariants() {
        TrainConfig::default().validate().unwrap();
        assert_eq!(TrainConfig { lr: 0.0, ..cfg() }.check().unwrap_err().0, "lr");
        assert_eq!(TrainConfig { keyframe_gap: 0, ..cfg() }.check().unwrap_err().0, "keyframe_gap");
        assert_eq!(TrainConfig { clip_frames: 0, ..cfg() }.check().unwrap_err().0, "clip_frames");
    }

    #[test]
    fn keyframe_schedule() {
        assert_eq!(keyframe_indices(33, 16), vec![0, 16, 32]);
        assert_eq!(keyframe_indices(5, 16), vec![0]);
    }

    #[test]
    fn ref_clip_masks_leading_frames() {
        let img = Tensor::ones((2, 3, 2, 2, 3), DType::F32, &Device::Cpu).unwrap();
        let r = leading_ref_clip(&img, &[1, 0]).unwrap();
        let m: Vec<f32> = r.mask.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(m.iter().sum::<f32>(), 4.0);
        assert!(m[..4].iter().all(|&x| x == 1.0));
    }

    #[test]
    fn steps_are_deterministic_and_resumable() {
        let seqs = data(3);
        let refs: Vec<&Sequence> = seqs.iter().collect();
        let mut a = Trainer::new(tiny_net(), cfg(), BridgeConfig::default()).unwrap();
        a.run(&refs, 3, None, None).unwrap();
        let mid = a.checkpoint().unwrap();
        a.run(&refs, 6, None, None).unwrap();

        let mut b = Trainer::new(tiny_net(), cfg(), BridgeConfig::default()).unwrap();
        b.run(&refs, 6, None, None).unwrap();
        assert_eq!(a.checkpoint().unwrap().to_bytes().unwrap(), b.checkpoint().unwrap().to_bytes().unwrap());

        let bytes = mid.to_bytes().unwrap();
        let mid = Checkpoint::from_bytes(&bytes, Path::new("mid")).unwrap();
        let mut c = Trainer::resume(&mid).unwrap();
        assert_eq!(c.step, 3);
        c.run(&refs, 6, None, None).unwrap();
        assert_eq!(c.checkpoint().unwrap().payload, a.checkpoint().unwrap().payload);
        let la: Vec<f64> = a.history[3..].iter().map(|r| r.loss_latent).collect();
        let lc: Vec<f64> = c.history.iter().map(|r| r.loss_latent).collect();
        assert_eq!(la, lc);
    }

    #[test]
    fn stage_two_freezes_base() {
        let seqs = data(4);
        let refs: Vec<&Sequence> = seqs.iter().collect();
        let mut a = Trainer::new(tiny_net(), cfg(), BridgeConfig::default()).unwrap();
        a.run(&refs, 2, None, None).unwrap();
        let base = a.checkpoint().unwrap();
        let kcfg = TrainConfig { keyframe_gap: 2, ..cfg() };
        let mut k = Trainer::keyframe_stage(&base, "h", kcfg).unwrap();
        let inputs = k.sample_inputs(&refs, 0).unwrap();
        assert_eq!(inputs.cond.keyframes.as_ref().unwrap().index[0], vec![0, 2]);
        let parts = compute_loss(&k.net, &inputs, &k.bridge, 1.0, LossTerms::FULL).unwrap();
        let grads = parts.total.backward().unwrap();
        for p in k.net.params() {
            let has = grads.get(p.var.as_tensor()).is_some();
            assert_eq!(has, p.group == ParamGroup::KeyframeAdapter, "{}", p.name);
        }
        k.run(&refs, 3, None, None).unwrap();
        let after = k.checkpoint().unwrap();
        for e in &after.header.params {
            let n: usize = e.shape.iter().product();
            let same = after.payload[e.offset..e.offset + n] == base.payload[e.offset..e.offset + n];
            if e.group != ParamGroup::KeyframeAdapter {
                assert!(same, "{} moved", e.name);
            }
        }
        assert!(Trainer::keyframe_stage(&after, "h", cfg()).is_err());
    }

    #[test]
    fn short_sequences_rejected() {
        let seqs = data(1);
        let refs: Vec<&Sequence> = seqs.iter().collect();
        let t = Trainer::new(tiny_net(), cfg(), BridgeConfig::default()).unwrap();
        assert!(t.sample_inputs(&refs, 0).is_err());
        assert!(t.sample_inputs(&[], 0).is_err());
    }

    #[test]
    fn smoothing() {
        assert_eq!(smoothed(&[1.0, 3.0], 0.5), vec![1.0, 2.0]);
    }
}
