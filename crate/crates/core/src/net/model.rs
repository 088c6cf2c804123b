use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use super::layers::{attention, layer_norm, merge_heads, split_heads, Linear, Lora};
use super::params::{Builder, GroupMask, Init, Param, ParamGroup, ParamStore};
use super::patch::{patchify, unpatchify, TokenGrid};
use super::rope::RopeTable;
use super::{NetConfig, ATTRIBUTE_CHANNELS, INPUT_CHANNELS};
use crate::{Error, Result};

/// Intrinsic channel predicted by the inverse adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Albedo,
    Normal,
    Depth,
    Material,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Albedo, Modality::Normal, Modality::Depth, Modality::Material];

    pub fn channels(self) -> usize {
        match self {
            Modality::Depth => 1,
            _ => 3,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Albedo => "albedo",
            Modality::Normal => "normal",
            Modality::Depth => "depth",
            Modality::Material => "material",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown modality `{s}`")))
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Masked reference clip: `images` `[B, F, H, W, 3]`, `mask` `[B, F, H, W, 1]`.
#[derive(Debug, Clone)]
pub struct RefClip {
    pub images: Tensor,
    pub mask: Tensor,
}

/// Keyframe images `[B, K, H, W, 3]` with absolute frame indices per batch item.
#[derive(Debug, Clone)]
pub struct Keyframes {
    pub images: Tensor,
    pub index: Vec<Vec<usize>>,
}

/// Everything the forward renderer conditions on besides `zt` and `t`.
#[derive(Debug, Clone)]
pub struct Conditioning {
    /// `[B, F, H, W, 8]`: normal, depth, material, hit mask.
    pub attributes: Tensor,
    /// `[B, F, He, We, 3]` tonemapped, camera-rotated envmaps.
    pub env_ldr: Tensor,
    /// Absolute frame index of each clip frame, `[B][F]`.
    pub frame_index: Vec<Vec<usize>>,
    pub ref_clip: Option<RefClip>,
    pub keyframes: Option<Keyframes>,
}

#[derive(Debug)]
struct KeyframeBranch {
    q: Option<Linear>,
    k: Linear,
    v: Linear,
    o: Linear,
    ffn_lora: Option<(Lora, Lora)>,
}

#[derive(Debug)]
struct Block {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ffn1: Linear,
    ffn2: Linear,
    env_mod: Linear,
    kf: KeyframeBranch,
}

#[derive(Debug)]
struct InverseBlock {
    lq: Lora,
    lk: Lora,
    lv: Lora,
    xq: Linear,
    xk: Linear,
    xv: Linear,
    xo: Linear,
}

/// Adapter turning the forward trunk into an intrinsic predictor.
#[derive(Debug)]
pub struct InverseHeads {
    embed: Linear,
    prompts: Vec<Param>,
    heads: Vec<(Linear, Linear)>,
    blocks: Vec<InverseBlock>,
    pub lora_rank: usize,
    pub prompt_tokens: usize,
}

struct KeyframeCtx {
    tokens: Tensor,
    q_rope: RopeTable,
    k_rope: RopeTable,
}

struct Ctx<'a> {
    mask: GroupMask,
    frames: usize,
    env: Option<Tensor>,
    kf: Option<KeyframeCtx>,
    inverse: Option<(&'a InverseHeads, Tensor)>,
}

/// The conditional velocity network.
#[derive(Debug)]
pub struct RenderNet {
    cfg: NetConfig,
    store: ParamStore,
    embed: Linear,
    attr_embed: Linear,
    pos: Param,
    time1: Linear,
    time2: Linear,
    env_embed: Linear,
    env_pos: Param,
    kf_embed: Linear,
    blocks: Vec<Block>,
    head: Linear,
    inverse: Option<InverseHeads>,
    trainable: GroupMask,
}

fn sinusoid(t: &[f64], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let x = ti * 1000.0;
        let mut row = vec![0.0; dim];
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            row[i] = (x * freq).cos();
            row[half + i] = (x * freq).sin();
        }
        data.extend(row);
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), device)?.to_dtype(dtype)?)
}

/// `(1 + γ) ⊙ f + β` with `f` `[B, F, T, dim]` and `γ, β` `[B, F, dim]`.
pub(crate) fn modulate(f: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let g = (gamma.unsqueeze(2)? + 1.0)?;
    Ok(f.broadcast_mul(&g)?.broadcast_add(&beta.unsqueeze(2)?)?)
}

fn check_dims(name: &str, t: &Tensor, want: &[usize]) -> Result<()> {
    if t.dims() != want {
        return Err(Error::invalid(format!("{name} has shape {:?}, expected {:?}", t.dims(), want)));
    }
    Ok(())
}

impl RenderNet {
    pub fn new(cfg: NetConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.init_seed, dtype, device.clone());
        let p = cfg.patch;
        let d = cfg.dim;
        let pe = cfg.env_patch;
        let hidden = cfg.ffn_hidden();
        let rank = cfg.lora_rank;

        let mut b = Builder::new(&mut store, "", ParamGroup::Base);
        let embed = Linear::new(&mut b, "embed", INPUT_CHANNELS * p * p, d)?;
        let attr_embed = Linear::new(&mut b, "attr_embed", ATTRIBUTE_CHANNELS * p * p, d)?;
        let pos = b.param("pos", &[cfg.tokens_per_frame(), d], Init::Normal(0.02))?;
        let time1 = Linear::new(&mut b, "time.0", d, d)?;
        let time2 = Linear::new(&mut b, "time.1", d, d)?;
        let head = Linear::zeros(&mut b, "head", d, 3 * p * p)?;

        let mut eb = b.with_group(ParamGroup::EnvmapAdapter);
        let env_embed = Linear::new(&mut eb, "env_embed", 3 * pe * pe, d)?;
        let env_pos = eb.param("env_pos", &[cfg.env_tokens(), d], Init::Normal(0.02))?;

        let mut kb = b.with_group(ParamGroup::KeyframeAdapter);
        let kf_embed = Linear::new(&mut kb, "kf_embed", 3 * p * p, d)?;

        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let mut bb = b.sub(&format!("blocks.{i}"));
            let q = Linear::new(&mut bb, "q", d, d)?;
            let k = Linear::new(&mut bb, "k", d, d)?;
            let v = Linear::new(&mut bb, "v", d, d)?;
            let o = Linear::new(&mut bb, "o", d, d)?;
            let ffn1 = Linear::new(&mut bb, "ffn1", d, hidden)?;
            let ffn2 = Linear::new(&mut bb, "ffn2", hidden, d)?;
            let env_mod = Linear::zeros(&mut bb.with_group(ParamGroup::EnvmapAdapter), "env_mod", d, 2 * d)?;
            let mut kb = bb.with_group(ParamGroup::KeyframeAdapter);
            let kf = KeyframeBranch {
                q: match cfg.keyframe_variant {
                    super::KeyframeVariant::DedicatedQuery => Some(Linear::new(&mut kb, "kf_q", d, d)?),
                    super::KeyframeVariant::ReusedQuery => None,
                },
                k: Linear::new(&mut kb, "kf_k", d, d)?,
                v: Linear::new(&mut kb, "kf_v", d, d)?,
                o: Linear::zeros(&mut kb, "kf_o", d, d)?,
                ffn_lora: if cfg.keyframe_ffn_lora {
                    Some((
                        Lora::new(&mut kb, "kf_lora1", d, hidden, rank)?,
                        Lora::new(&mut kb, "kf_lora2", hidden, d, rank)?,
                    ))
                } else {
                    None
                },
            };
            blocks.push(Block { q, k, v, o, ffn1, ffn2, env_mod, kf });
        }

        Ok(Self {
            cfg,
            store,
            embed,
            attr_embed,
            pos,
            time1,
            time2,
            env_embed,
            env_pos,
            kf_embed,
            blocks,
            head,
            inverse: None,
            trainable: GroupMask::NONE,
        })
    }

    /// Adds the inverse adapter (embedder, q/k/v LoRA, prompt cross-attention,
    /// prompt tokens and heads).
    pub fn attach_inverse(&mut self, lora_rank: usize, prompt_tokens: usize, seed: u64) -> Result<()> {
        if self.inverse.is_some() {
            return Err(Error::invalid("inverse adapter already attached"));
        }
        if lora_rank == 0 || prompt_tokens == 0 {
            return Err(Error::invalid("inverse lora_rank and prompt_tokens must be positive"));
        }
        let p = self.cfg.patch;
        let d = self.cfg.dim;
        self.store.reseed(seed);
        let mut b = Builder::new(&mut self.store, "inverse", ParamGroup::InverseAdapter);
        let embed = Linear::new(&mut b, "embed", 6 * p * p, d)?;
        let mut prompts = Vec::new();
        let mut heads = Vec::new();
        for m in Modality::ALL {
            prompts.push(b.param(&format!("prompt.{m}"), &[prompt_tokens, d], Init::Normal(1.0))?);
            let mut hb = b.sub(&format!("head.{m}"));
            heads.push((
                Linear::new(&mut hb, "0", d, d)?,
                Linear::zeros(&mut hb, "1", d, m.channels() * p * p)?,
            ));
        }
        let mut blocks = Vec::new();
        for i in 0..self.cfg.depth {
            let mut bb = b.sub(&format!("blocks.{i}"));
            blocks.push(InverseBlock {
                lq: Lora::new(&mut bb, "lora_q", d, d, lora_rank)?,
                lk: Lora::new(&mut bb, "lora_k", d, d, lora_rank)?,
                lv: Lora::new(&mut bb, "lora_v", d, d, lora_rank)?,
                xq: Linear::new(&mut bb, "xq", d, d)?,
                xk: Linear::new(&mut bb, "xk", d, d)?,
                xv: Linear::new(&mut bb, "xv", d, d)?,
                xo: Linear::zeros(&mut bb, "xo", d, d)?,
            });
        }
        self.inverse = Some(InverseHeads {
            embed,
            prompts,
            heads,
            blocks,
            lora_rank,
            prompt_tokens,
        });
        Ok(())
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn params(&self) -> &[Param] {
        self.store.params()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn inverse(&self) -> Option<&InverseHeads> {
        self.inverse.as_ref()
    }

    pub fn has_inverse(&self) -> bool {
        self.inverse.is_some()
    }

    /// Groups whose parameters take part in autodiff; all others are detached.
    pub fn set_trainable(&mut self, mask: GroupMask) {
        self.trainable = mask;
    }

    pub fn trainable(&self) -> GroupMask {
        self.trainable
    }

    fn spatial_pos(&self, x: &Tensor, frames: usize) -> Result<Tensor> {
        let (b, _, d) = x.dims3()?;
        let tp = self.cfg.tokens_per_frame();
        Ok(x.reshape((b, frames, tp, d))?
            .broadcast_add(&self.pos.get(self.trainable))?
            .reshape((b, frames * tp, d))?)
    }

    fn time_embedding(&self, t: &[f64]) -> Result<Tensor> {
        let s = sinusoid(t, self.cfg.dim, self.dtype(), self.device())?;
        let h = self.time1.forward(&s, self.trainable)?.silu()?;
        Ok(self.time2.forward(&h, self.trainable)?.unsqueeze(1)?)
    }

    /// Attribute tokens `[B, F·Hp·Wp, dim]` from `[B, F, H, W, 8]` buffers.
    pub fn embed_attributes(&self, attributes: &Tensor) -> Result<TokenGrid> {
        let (_, f, h, w, c) = attributes.dims5()?;
        if c != ATTRIBUTE_CHANNELS || h != self.cfg.height || w != self.cfg.width {
            return Err(Error::invalid(format!(
                "attribute buffers {h}x{w}x{c} do not match network {}x{}x{ATTRIBUTE_CHANNELS}",
                self.cfg.height, self.cfg.width
            )));
        }
        let p = self.cfg.patch;
        Ok(TokenGrid {
            tokens: self.attr_embed.forward(&patchify(attributes, p)?, self.trainable)?,
            frames: f,
            rows: h / p,
            cols: w / p,
        })
    }

    /// Mean-pooled envmap features `[B, F, dim]`.
    pub fn env_features(&self, env_ldr: &Tensor) -> Result<Tensor> {
        let (b, f, he, we, c) = env_ldr.dims5()?;
        if c != 3 || he != self.cfg.env_height || we != self.cfg.env_width {
            return Err(Error::invalid(format!(
                "envmap {he}x{we}x{c} does not match network {}x{}x3",
                self.cfg.env_height, self.cfg.env_width
            )));
        }
        let tokens = self.env_embed.forward(&patchify(env_ldr, self.cfg.env_patch)?, self.trainable)?;
        let ne = self.cfg.env_tokens();
        let tokens = tokens
            .reshape((b, f, ne, self.cfg.dim))?
            .broadcast_add(&self.env_pos.get(self.trainable))?
            .silu()?;
        Ok(tokens.mean(2)?)
    }

    /// Per-block `(γ, β)`, each `[B, F, dim]`.
    pub fn env_gamma_beta(&self, pooled: &Tensor, block: usize) -> Result<(Tensor, Tensor)> {
        let blk = self
            .blocks
            .get(block)
            .ok_or_else(|| Error::invalid(format!("block {block} out of range")))?;
        let gb = blk.env_mod.forward(pooled, self.trainable)?;
        let d = self.cfg.dim;
        Ok((gb.narrow(D::Minus1, 0, d)?, gb.narrow(D::Minus1, d, d)?))
    }

    fn keyframe_ctx(&self, kf: &Keyframes, frame_index: &[Vec<usize>], batch: usize, frames: usize) -> Result<Option<KeyframeCtx>> {
        let (b, k, h, w, c) = kf.images.dims5()?;
        if k == 0 {
            return Ok(None);
        }
        if b != batch || c != 3 || h != self.cfg.height || w != self.cfg.width {
            return Err(Error::invalid(format!("keyframes have shape {:?}", kf.images.dims())));
        }
        if kf.index.len() != b || kf.index.iter().any(|v| v.len() != k) {
            return Err(Error::invalid("one keyframe index per keyframe is required"));
        }
        let tp = self.cfg.tokens_per_frame();
        let tokens = self.kf_embed.forward(&patchify(&kf.images, self.cfg.patch)?, self.trainable)?;
        let tokens = layer_norm(&self.spatial_pos(&tokens, k)?)?;
        let expand = |idx: &[usize]| -> Vec<usize> {
            idx.iter().flat_map(|&i| std::iter::repeat_n(i, tp)).collect()
        };
        let qpos: Vec<Vec<usize>> = frame_index.iter().map(|v| expand(v)).collect();
        let kpos: Vec<Vec<usize>> = kf.index.iter().map(|v| expand(v)).collect();
        debug_assert!(qpos.iter().all(|v| v.len() == frames * tp));
        let hd = self.cfg.head_dim();
        Ok(Some(KeyframeCtx {
            tokens,
            q_rope: RopeTable::new(&qpos, hd, self.dtype(), self.device())?,
            k_rope: RopeTable::new(&kpos, hd, self.dtype(), self.device())?,
        }))
    }

    /// Velocity prediction `[B, F, H, W, 3]` for the forward renderer.
    pub fn forward(&self, zt: &Tensor, t: &[f64], cond: &Conditioning, use_keyframes: bool) -> Result<Tensor> {
        let (b, f, h, w, c) = zt.dims5()?;
        if c != 3 || h != self.cfg.height || w != self.cfg.width {
            return Err(Error::invalid(format!(
                "clip {h}x{w}x{c} does not match network {}x{}x3",
                self.cfg.height, self.cfg.width
            )));
        }
        if t.len() != b {
            return Err(Error::invalid(format!("{} timesteps for batch {b}", t.len())));
        }
        if cond.frame_index.len() != b || cond.frame_index.iter().any(|v| v.len() != f) {
            return Err(Error::invalid("frame_index must be [batch][frames]"));
        }
        check_dims("attributes", &cond.attributes, &[b, f, h, w, ATTRIBUTE_CHANNELS])?;
        let (ref_img, ref_mask) = match &cond.ref_clip {
            Some(r) => {
                check_dims("ref_clip", &r.images, &[b, f, h, w, 3])?;
                check_dims("ref_mask", &r.mask, &[b, f, h, w, 1])?;
                (r.images.broadcast_mul(&r.mask)?, r.mask.clone())
            }
            None => (zt.zeros_like()?, Tensor::zeros((b, f, h, w, 1), zt.dtype(), zt.device())?),
        };
        let p = self.cfg.patch;
        let input = Tensor::cat(&[zt, &ref_img, &ref_mask], 4)?;
        let x = self.embed.forward(&patchify(&input, p)?, self.trainable)?;
        let x = (x + self.embed_attributes(&cond.attributes)?.tokens)?;
        let x = self.spatial_pos(&x, f)?;
        let x = x.broadcast_add(&self.time_embedding(t)?)?;

        let env = self.env_features(&cond.env_ldr)?;
        let kf = match (&cond.keyframes, use_keyframes) {
            (Some(k), true) => self.keyframe_ctx(k, &cond.frame_index, b, f)?,
            _ => None,
        };
        let ctx = Ctx {
            mask: self.trainable,
            frames: f,
            env: Some(env),
            kf,
            inverse: None,
        };
        let x = self.run_blocks(x, &ctx)?;
        let out = self.head.forward(&layer_norm(&x)?, self.trainable)?;
        unpatchify(&out, f, h, w, p)
    }

    /// Intrinsic velocity `[B, F, H, W, C_modality]` from the rgb clip and the
    /// bridge state `zt` (same channel count as the modality).
    pub fn inverse_forward(&self, rgb: &Tensor, zt: &Tensor, t: &[f64], modality: Modality) -> Result<Tensor> {
        let inv = self
            .inverse
            .as_ref()
            .ok_or_else(|| Error::Unsupported("network has no inverse adapter".into()))?;
        let (b, f, h, w, _) = rgb.dims5()?;
        check_dims("rgb", rgb, &[b, f, self.cfg.height, self.cfg.width, 3])?;
        let mc = modality.channels();
        check_dims("zt", zt, &[b, f, h, w, mc])?;
        if t.len() != b {
            return Err(Error::invalid(format!("{} timesteps for batch {b}", t.len())));
        }
        let zt3 = if mc == 3 {
            zt.clone()
        } else {
            Tensor::cat(&[zt, &Tensor::zeros((b, f, h, w, 3 - mc), zt.dtype(), zt.device())?], 4)?
        };
        let p = self.cfg.patch;
        let input = Tensor::cat(&[&zt3, rgb], 4)?;
        let x = inv.embed.forward(&patchify(&input, p)?, self.trainable)?;
        let x = self.spatial_pos(&x, f)?;
        let x = x.broadcast_add(&self.time_embedding(t)?)?;
        let prompts = inv.prompts[modality.index()].get(self.trainable);
        let ctx = Ctx {
            mask: self.trainable,
            frames: f,
            env: None,
            kf: None,
            inverse: Some((inv, prompts)),
        };
        let x = self.run_blocks(x, &ctx)?;
        let (h1, h2) = &inv.heads[modality.index()];
        let y = h1.forward(&layer_norm(&x)?, self.trainable)?.gelu()?;
        let y = h2.forward(&y, self.trainable)?;
        unpatchify(&y, f, h, w, p)
    }

    fn run_blocks(&self, mut x: Tensor, ctx: &Ctx) -> Result<Tensor> {
        for (i, blk) in self.blocks.iter().enumerate() {
            let env = match &ctx.env {
                Some(pooled) => Some(self.env_gamma_beta(pooled, i)?),
                None => None,
            };
            let inv = ctx.inverse.as_ref().map(|(heads, prompts)| (&heads.blocks[i], prompts));
            x = blk.forward(&x, ctx, env.as_ref(), inv, self.cfg.heads)?;
        }
        Ok(x)
    }
}

impl Block {
    fn forward(
        &self,
        x: &Tensor,
        ctx: &Ctx,
        env: Option<&(Tensor, Tensor)>,
        inv: Option<(&InverseBlock, &Tensor)>,
        heads: usize,
    ) -> Result<Tensor> {
        let m = ctx.mask;
        let (b, n, d) = x.dims3()?;
        let mut h = layer_norm(x)?;
        if let Some((gamma, beta)) = env {
            let f = ctx.frames;
            h = modulate(&h.reshape((b, f, n / f, d))?, gamma, beta)?.reshape((b, n, d))?;
        }
        let mut q = self.q.forward(&h, m)?;
        let mut k = self.k.forward(&h, m)?;
        let mut v = self.v.forward(&h, m)?;
        if let Some((ib, _)) = inv {
            q = (q + ib.lq.forward(&h, m)?)?;
            k = (k + ib.lk.forward(&h, m)?)?;
            v = (v + ib.lv.forward(&h, m)?)?;
        }
        let qh = split_heads(&q, heads)?;
        let sa = attention(&qh, &split_heads(&k, heads)?, &split_heads(&v, heads)?)?;
        let mut x = (x + self.o.forward(&merge_heads(&sa)?, m)?)?;

        if let Some(kf) = &ctx.kf {
            x = (x + self.keyframe_residual(&h, &qh, kf, m, heads)?)?;
        }

        if let Some((ib, prompts)) = inv {
            let hx = layer_norm(&x)?;
            let pm = prompts.dim(0)?;
            let pk = ib.xk.forward(prompts, m)?.unsqueeze(0)?.broadcast_as((b, pm, d))?.contiguous()?;
            let pv = ib.xv.forward(prompts, m)?.unsqueeze(0)?.broadcast_as((b, pm, d))?.contiguous()?;
            let a = attention(
                &split_heads(&ib.xq.forward(&hx, m)?, heads)?,
                &split_heads(&pk, heads)?,
                &split_heads(&pv, heads)?,
            )?;
            x = (x + ib.xo.forward(&merge_heads(&a)?, m)?)?;
        }

        let h2 = layer_norm(&x)?;
        let lora = if ctx.kf.is_some() { self.kf.ffn_lora.as_ref() } else { None };
        let mut a = self.ffn1.forward(&h2, m)?;
        if let Some((l1, _)) = lora {
            a = (a + l1.forward(&h2, m)?)?;
        }
        let a = a.gelu()?;
        let mut y = self.ffn2.forward(&a, m)?;
        if let Some((_, l2)) = lora {
            y = (y + l2.forward(&a, m)?)?;
        }
        Ok((x + y)?)
    }

    fn keyframe_residual(&self, h: &Tensor, q_self: &Tensor, kf: &KeyframeCtx, m: GroupMask, heads: usize) -> Result<Tensor> {
        let q = match &self.kf.q {
            Some(lin) => split_heads(&lin.forward(h, m)?, heads)?,
            None => q_self.clone(),
        };
        let k = split_heads(&self.kf.k.forward(&kf.tokens, m)?, heads)?;
        let v = split_heads(&self.kf.v.forward(&kf.tokens, m)?, heads)?;
        let q = kf.q_rope.apply(&q)?;
        let k = kf.k_rope.apply(&k)?;
        let a = attention(&q, &k, &v)?;
        self.kf.o.forward(&merge_heads(&a)?, m)
    }
}
