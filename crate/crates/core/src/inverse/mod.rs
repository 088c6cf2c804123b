//! Intrinsic decomposition on top of a frozen forward checkpoint.
//!
//! The trunk of a trained forward network is reused read-only. A new
//! embedder reads the rgb clip, LoRA updates adapt the attention
//! projections, a cross-attention over learned per-modality prompt tokens
//! selects the target, and one head per modality produces the velocity of
//! a bridge from the rgb clip (or its channel mean, for depth) to the
//! intrinsic layer.

mod losses;

pub use losses::{
    loss_albedo, loss_depth_ssi, loss_depth_ssi_log, loss_material, loss_normal, ssi_from_delta, COSINE_EPS,
    DEFAULT_SSI_LAMBDA, DEPTH_EPS,
};

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, D};
use ndarray::Array3;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::{
    interpolate, ode_step, recover_endpoint, sample_timestep, standard_normal_like, velocity_target, BridgeConfig,
};
use crate::clip::{array_to_tensor, tensor_to_array, tensor_to_frames, Clip};
use crate::infer::{disjoint_chunk_starts, time_points};
use crate::metrics::{angular_error, psnr};
use crate::net::{GroupMask, Modality, ParamGroup, RenderNet};
use crate::scene::Sequence;
use crate::train::{mse, warmup_lr, AdamW, Checkpoint, InverseMeta, Stage};
use crate::{Error, Result};

/// Relative sampling weight of each modality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModalityWeights {
    pub albedo: f64,
    pub normal: f64,
    pub depth: f64,
    pub material: f64,
}

impl Default for ModalityWeights {
    fn default() -> Self {
        Self {
            albedo: 1.0,
            normal: 1.0,
            depth: 1.0,
            material: 1.0,
        }
    }
}

impl ModalityWeights {
    pub fn get(&self, m: Modality) -> f64 {
        match m {
            Modality::Albedo => self.albedo,
            Modality::Normal => self.normal,
            Modality::Depth => self.depth,
            Modality::Material => self.material,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InverseConfig {
    pub lora_rank: usize,
    pub prompt_tokens: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub steps: usize,
    pub batch: usize,
    pub clip_frames: usize,
    pub seed: u64,
    pub weights: ModalityWeights,
    /// Weight of the perceptual proxy in the albedo loss.
    pub lambda_albedo: f64,
    /// Coefficient of the squared-mean term of the log-depth loss.
    pub ssi_lambda: f64,
    pub weight_decay: f64,
    pub checkpoint_every: usize,
}

impl Default for InverseConfig {
    fn default() -> Self {
        Self {
            lora_rank: 8,
            prompt_tokens: 4,
            lr: 1e-4,
            warmup_steps: 50,
            steps: 1000,
            batch: 4,
            clip_frames: 5,
            seed: 0,
            weights: ModalityWeights::default(),
            lambda_albedo: 1.0,
            ssi_lambda: DEFAULT_SSI_LAMBDA,
            weight_decay: 0.0,
            checkpoint_every: 500,
        }
    }
}

impl InverseConfig {
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.lora_rank == 0 {
            return Err(("lora_rank", "must be at least 1".into()));
        }
        if self.prompt_tokens == 0 {
            return Err(("prompt_tokens", "must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(("lr", format!("must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(("batch", "must be at least 1".into()));
        }
        if self.clip_frames == 0 {
            return Err(("clip_frames", "must be at least 1".into()));
        }
        let w = [self.weights.albedo, self.weights.normal, self.weights.depth, self.weights.material];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(("weights", "must be non-negative with a positive sum".into()));
        }
        if !(self.lambda_albedo.is_finite() && self.lambda_albedo >= 0.0) {
            return Err(("lambda_albedo", "must be non-negative".into()));
        }
        if !self.ssi_lambda.is_finite() {
            return Err(("ssi_lambda", "must be finite".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(("weight_decay", "must be non-negative".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|(field, msg)| Error::invalid(format!("inverse.{field}: {msg}")))
    }
}

/// Bridge source: the rgb clip, or its channel mean for depth.
pub fn modality_source(rgb: &Tensor, modality: Modality) -> Result<Tensor> {
    Ok(match modality {
        Modality::Depth => rgb.mean_keepdim(D::Minus1)?,
        _ => rgb.clone(),
    })
}

/// Bridge target of `modality` for a clip; depth is `ln(d + ε)`.
pub fn modality_target(clip: &Clip, modality: Modality) -> Result<Tensor> {
    Ok(match modality {
        Modality::Albedo => clip.albedo.clone(),
        Modality::Normal => clip.normal()?,
        Modality::Depth => (clip.depth()? + DEPTH_EPS)?.log()?,
        Modality::Material => clip.material()?,
    })
}

fn decode_normals(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(2.0, -1.0)?)
}

/// Modality loss between a predicted endpoint and the clip's target.
pub fn modality_loss(pred: &Tensor, clip: &Clip, modality: Modality, cfg: &InverseConfig) -> Result<Tensor> {
    let gt = modality_target(clip, modality)?;
    match modality {
        Modality::Albedo => loss_albedo(pred, &gt, cfg.lambda_albedo),
        Modality::Normal => loss_normal(&decode_normals(pred)?, &decode_normals(&gt)?, &clip.hit_mask()?),
        Modality::Depth => loss_depth_ssi_log(pred, &gt, &clip.hit_mask()?, cfg.ssi_lambda),
        Modality::Material => loss_material(pred, &gt),
    }
}

/// Displayable `[..., 3]` image in `[0, 1]` from a raw endpoint.
pub fn to_display(raw: &Tensor, modality: Modality) -> Result<Tensor> {
    let x = match modality {
        Modality::Depth => {
            let d = (raw.exp()? - DEPTH_EPS)?;
            Tensor::cat(&[&d, &d, &d], D::Minus1)?
        }
        _ => raw.clone(),
    };
    Ok(x.clamp(0f32, 1f32)?)
}

/// Integrates the inverse bridge over the first `steps` grid points and
/// returns the raw endpoint (log-depth for depth).
pub fn invert(net: &RenderNet, bridge: &BridgeConfig, rgb: &Tensor, modality: Modality, steps: usize) -> Result<Tensor> {
    let ts = time_points(bridge, steps)?;
    let b = rgb.dim(0)?;
    let mut z = modality_source(rgb, modality)?;
    for (i, &t) in ts.iter().enumerate() {
        let v = net.inverse_forward(rgb, &z, &vec![t; b], modality)?;
        z = match ts.get(i + 1) {
            None => recover_endpoint(&z, &v, t)?,
            Some(&next) => ode_step(&z, &v, t, next - t)?,
        };
    }
    Ok(z)
}

/// One line of the inverse training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseLogRecord {
    pub step: usize,
    pub modality: Modality,
    pub loss_latent: f64,
    pub loss_modality: f64,
    /// L2 norm of every gradient reaching a parameter outside the adapter.
    pub frozen_grad_norm: f64,
    pub lr: f64,
    pub wallclock: f64,
}

/// Sampled inputs of one inverse step.
#[derive(Debug, Clone)]
pub struct InverseBatch {
    pub modality: Modality,
    pub clip: Clip,
    pub zt: Tensor,
    pub z1: Tensor,
    pub t: Vec<f64>,
}

/// Latent bridge loss plus the modality loss on the recovered endpoint.
pub fn inverse_loss(net: &RenderNet, batch: &InverseBatch, bridge: &BridgeConfig, cfg: &InverseConfig) -> Result<(Tensor, f64, f64)> {
    let v = net.inverse_forward(&batch.clip.reference, &batch.zt, &batch.t, batch.modality)?;
    let mut targets = Vec::with_capacity(batch.t.len());
    let mut preds = Vec::with_capacity(batch.t.len());
    for (i, &t) in batch.t.iter().enumerate() {
        let zt = batch.zt.narrow(0, i, 1)?;
        targets.push(velocity_target(&batch.z1.narrow(0, i, 1)?, &zt, t, bridge.t_max)?);
        preds.push(recover_endpoint(&zt, &v.narrow(0, i, 1)?, t)?);
    }
    let latent = mse(&v, &Tensor::cat(&targets, 0)?)?;
    let modal = modality_loss(&Tensor::cat(&preds, 0)?, &batch.clip, batch.modality, cfg)?;
    let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let (l, m) = (scalar(&latent)?, scalar(&modal)?);
    Ok(((latent + modal)?, l, m))
}

fn adapter_only() -> GroupMask {
    GroupMask::of(&[ParamGroup::InverseAdapter])
}

pub struct InverseTrainer {
    pub net: RenderNet,
    pub opt: AdamW,
    pub cfg: InverseConfig,
    pub bridge: BridgeConfig,
    pub forward_hash: String,
    pub step: usize,
    pub history: Vec<InverseLogRecord>,
    elapsed: f64,
}

impl InverseTrainer {
    /// Attaches a fresh adapter to the frozen forward checkpoint.
    pub fn new(forward: &Checkpoint, forward_hash: &str, cfg: InverseConfig) -> Result<Self> {
        cfg.validate()?;
        let mut net = forward.build_net(DType::F32, &Device::Cpu)?;
        net.attach_inverse(cfg.lora_rank, cfg.prompt_tokens, cfg.seed)?;
        net.set_trainable(adapter_only());
        let opt = AdamW::new(net.params(), cfg.weight_decay)?;
        Ok(Self {
            net,
            opt,
            cfg,
            bridge: forward.header.bridge.clone(),
            forward_hash: forward_hash.to_string(),
            step: 0,
            history: Vec::new(),
            elapsed: 0.0,
        })
    }

    /// Continues from one of this trainer's own checkpoints.
    pub fn resume(inverse: &Checkpoint, forward: &Checkpoint, forward_hash: &str) -> Result<Self> {
        let cfg: InverseConfig = serde_json::from_value(inverse.header.train["config"].clone())
            .map_err(|e| Error::invalid(format!("checkpoint has no usable inverse config: {e}")))?;
        let model = InverseModel::from_checkpoints(inverse, forward, forward_hash)?;
        let mut net = model.net;
        net.set_trainable(adapter_only());
        let opt = inverse
            .optimizer(&net)?
            .ok_or_else(|| Error::invalid("checkpoint has no optimizer state to resume from"))?;
        Ok(Self {
            net,
            opt,
            cfg,
            bridge: model.bridge,
            forward_hash: forward_hash.to_string(),
            step: inverse.header.step,
            history: Vec::new(),
            elapsed: 0.0,
        })
    }

    fn step_rng(&self, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step as u64);
        rng
    }

    /// Samples the modality and batch of `step`.
    pub fn sample(&self, data: &[&Sequence], step: usize) -> Result<InverseBatch> {
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
        let mut rng = self.step_rng(step);
        let w = self.cfg.weights;
        let dist = WeightedIndex::new([w.albedo, w.normal, w.depth, w.material])
            .map_err(|e| Error::invalid(format!("inverse.weights: {e}")))?;
        let modality = Modality::ALL[dist.sample(&mut rng)];
        let (dtype, dev) = (self.net.dtype(), self.net.device().clone());
        let mut clips = Vec::with_capacity(self.cfg.batch);
        let mut zts = Vec::with_capacity(self.cfg.batch);
        let mut ts = Vec::with_capacity(self.cfg.batch);
        for _ in 0..self.cfg.batch {
            let seq = data[rng.random_range(0..data.len())];
            let start = rng.random_range(0..=seq.len() - f);
            let clip = Clip::window(seq, start, f, dtype, &dev)?;
            let z0 = modality_source(&clip.reference, modality)?;
            let z1 = modality_target(&clip, modality)?;
            let t = sample_timestep(&self.bridge, &mut rng);
            let eps = standard_normal_like(&z0, &mut rng)?;
            zts.push(interpolate(&z0, &z1, t, self.bridge.sigma, &eps)?);
            ts.push(t);
            clips.push(clip);
        }
        let clip = Clip::cat(&clips)?;
        Ok(InverseBatch {
            modality,
            z1: modality_target(&clip, modality)?,
            zt: Tensor::cat(&zts, 0)?,
            t: ts,
            clip,
        })
    }

    pub fn train_step(&mut self, data: &[&Sequence]) -> Result<InverseLogRecord> {
        let clock = Instant::now();
        let batch = self.sample(data, self.step)?;
        let (total, latent, modal) = inverse_loss(&self.net, &batch, &self.bridge, &self.cfg)?;
        if !(latent + modal).is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!("{} latent {latent} modality {modal}", batch.modality),
            });
        }
        let grads = total.backward()?;
        let mut frozen = 0.0;
        for p in self.net.params() {
            if self.net.trainable().contains(p.group) {
                continue;
            }
            if let Some(g) = grads.get(p.var.as_tensor()) {
                frozen += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        let lr = warmup_lr(self.cfg.lr, self.cfg.warmup_steps, self.step);
        self.opt.step(self.net.params(), &grads, lr, self.net.trainable())?;
        self.step += 1;
        self.elapsed += clock.elapsed().as_secs_f64();
        let rec = InverseLogRecord {
            step: self.step,
            modality: batch.modality,
            loss_latent: latent,
            loss_modality: modal,
            frozen_grad_norm: frozen.sqrt(),
            lr,
            wallclock: self.elapsed,
        };
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Trains until `self.step == until`, like the forward trainer.
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

    /// Adapter-only checkpoint referencing the frozen forward checkpoint.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::capture(
            &self.net,
            adapter_only(),
            Stage::Inverse,
            self.step,
            &self.bridge,
            serde_json::json!({ "config": self.cfg }),
            Some(InverseMeta {
                lora_rank: self.cfg.lora_rank,
                prompt_tokens: self.cfg.prompt_tokens,
                seed: self.cfg.seed,
                forward_hash: self.forward_hash.clone(),
            }),
            Some(&self.opt),
        )
    }
}

/// A forward network with a trained adapter, ready for decomposition.
#[derive(Debug)]
pub struct InverseModel {
    pub net: RenderNet,
    pub bridge: BridgeConfig,
    pub forward_hash: String,
}

impl InverseModel {
    /// Rebuilds the adapter on top of `forward`, whose hash must match the
    /// one recorded in the adapter checkpoint.
    pub fn from_checkpoints(inverse: &Checkpoint, forward: &Checkpoint, forward_hash: &str) -> Result<Self> {
        if inverse.header.stage != Stage::Inverse {
            return Err(Error::invalid(format!(
                "expected an inverse checkpoint, got stage `{}`",
                inverse.header.stage
            )));
        }
        let meta = inverse
            .header
            .inverse
            .as_ref()
            .ok_or_else(|| Error::invalid("inverse checkpoint lacks adapter metadata"))?;
        if meta.forward_hash != forward_hash {
            return Err(Error::invalid(format!(
                "forward checkpoint hash {forward_hash} does not match the adapter's reference {}",
                meta.forward_hash
            )));
        }
        if inverse.header.net != forward.header.net {
            return Err(Error::invalid("adapter and forward checkpoint disagree on the network config"));
        }
        let mut net = forward.build_net(DType::F32, &Device::Cpu)?;
        net.attach_inverse(meta.lora_rank, meta.prompt_tokens, meta.seed)?;
        inverse.apply_to(&net)?;
        Ok(Self {
            net,
            bridge: forward.header.bridge.clone(),
            forward_hash: forward_hash.to_string(),
        })
    }

    pub fn load(inverse: &Path, forward: &Path) -> Result<Self> {
        let (inv, _) = Checkpoint::load(inverse)?;
        let (fwd, hash) = Checkpoint::load(forward)?;
        Self::from_checkpoints(&inv, &fwd, &hash)
    }

    /// Decomposes every frame of `seq` with `steps` bridge steps, in
    /// disjoint chunks of `chunk` frames. Returns raw endpoints per frame.
    pub fn decompose(&self, seq: &Sequence, modality: Modality, chunk: usize, steps: usize) -> Result<Vec<Array3<f32>>> {
        let mut out = Vec::with_capacity(seq.len());
        let (dtype, dev) = (self.net.dtype(), self.net.device().clone());
        for start in disjoint_chunk_starts(seq.len(), chunk) {
            let len = chunk.min(seq.len() - start);
            let clip = Clip::window(seq, start, len, dtype, &dev)?;
            let raw = invert(&self.net, &self.bridge, &clip.reference, modality, steps)?;
            out.extend(tensor_to_frames(&raw.squeeze(0)?)?);
        }
        Ok(out)
    }

    /// [`decompose`](Self::decompose) mapped to viewable `[0, 1]` images.
    pub fn decompose_display(
        &self,
        seq: &Sequence,
        modality: Modality,
        chunk: usize,
        steps: usize,
    ) -> Result<Vec<Array3<f32>>> {
        let dev = Device::Cpu;
        self.decompose(seq, modality, chunk, steps)?
            .iter()
            .map(|r| tensor_to_array(&to_display(&array_to_tensor(r, DType::F32, &dev)?, modality)?))
            .collect()
    }
}

/// Validation scores of an adapter against the two trivial baselines.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InverseEval {
    /// Mean angle in degrees over hit pixels.
    pub normal_angular_error: f64,
    /// Same for the constant `(0, 0, 1)` prediction.
    pub normal_baseline_error: f64,
    pub albedo_psnr: f64,
    /// PSNR of the rendered input used as the albedo prediction.
    pub albedo_baseline_psnr: f64,
    /// RMSE of log-depth over hit pixels after removing the mean offset.
    pub depth_si_rmse: f64,
    pub material_l1: f64,
    pub frames: usize,
}

fn shift_invariant_rmse(pred: &Array3<f32>, gt: &Array3<f32>, mask: &Array3<f32>) -> f64 {
    let d: Vec<f64> = pred
        .iter()
        .zip(gt)
        .zip(mask)
        .filter(|(_, m)| **m > 0.5)
        .map(|((p, g), _)| f64::from(*p) - (f64::from(*g) + DEPTH_EPS).ln())
        .collect();
    if d.is_empty() {
        return 0.0;
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt()
}

/// Single-step decomposition of every frame of `data`, averaged per frame.
pub fn evaluate_inverse(model: &InverseModel, data: &[&Sequence], chunk: usize) -> Result<InverseEval> {
    let mut e = InverseEval::default();
    let flat = Array3::from_shape_fn(
        (1, 1, 3),
        |(_, _, c)| if c == 2 { 1.0f32 } else { 0.5 },
    );
    for seq in data {
        let normals = model.decompose(seq, Modality::Normal, chunk, 1)?;
        let albedos = model.decompose(seq, Modality::Albedo, chunk, 1)?;
        let depths = model.decompose(seq, Modality::Depth, chunk, 1)?;
        let materials = model.decompose(seq, Modality::Material, chunk, 1)?;
        for (i, fr) in seq.frames.iter().enumerate() {
            let g = &fr.gbuffer;
            let mask = Some(&g.hit_mask);
            let baseline = flat.broadcast(g.normal.dim()).expect("broadcastable").to_owned();
            e.normal_angular_error += angular_error(&normals[i].mapv(|x| x.clamp(0.0, 1.0)), &g.normal, mask)?;
            e.normal_baseline_error += angular_error(&baseline, &g.normal, mask)?;
            e.albedo_psnr += psnr(&albedos[i].mapv(|x| x.clamp(0.0, 1.0)), &g.albedo)?;
            e.albedo_baseline_psnr += psnr(&fr.reference, &g.albedo)?;
            e.depth_si_rmse += shift_invariant_rmse(&depths[i], &g.depth, &g.hit_mask);
            e.material_l1 += (&materials[i] - &g.material).mapv(|x| f64::from(x.abs())).mean().unwrap_or(0.0);
            e.frames += 1;
        }
    }
    if e.frames > 0 {
        let n = e.frames as f64;
        for v in [
            &mut e.normal_angular_error,
            &mut e.normal_baseline_error,
            &mut e.albedo_psnr,
            &mut e.albedo_baseline_psnr,
            &mut e.depth_si_rmse,
            &mut e.material_l1,
        ] {
            *v /= n;
        }
    }
    Ok(e)
}
