//! Single- and multi-step rendering, progressive chunking, keyframe guidance
//! and the material-editing demo.

use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::{ode_step, recover_endpoint, sde_step, velocity_target, BridgeConfig, DEFAULT_SIGMA};
use crate::clip::{reference_frames, tensor_to_frames, Clip};
use crate::net::{Conditioning, Keyframes, RefClip, RenderNet};
use crate::scene::{synth_sequence, MaterialInterp, Sequence, SynthConfig};
use crate::train::{keyframe_indices, leading_ref_clip, Checkpoint, Stage};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Ode,
    Sde,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub steps: usize,
    pub mode: SamplerMode,
    pub sde_sigma: f64,
    pub use_keyframes: bool,
    pub keyframe_gap: usize,
    pub chunk_frames: usize,
    pub overlap: usize,
    /// Condition each chunk on frames rendered by the previous one. When off,
    /// chunks are disjoint and rendered independently.
    pub progressive: bool,
    pub rng_seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            steps: 1,
            mode: SamplerMode::Ode,
            sde_sigma: DEFAULT_SIGMA,
            use_keyframes: false,
            keyframe_gap: 16,
            chunk_frames: 5,
            overlap: 1,
            progressive: true,
            rng_seed: 0,
        }
    }
}

impl InferConfig {
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if ![1, 2, 4].contains(&self.steps) {
            return Err(("steps", format!("must be 1, 2 or 4, got {}", self.steps)));
        }
        if !(self.sde_sigma.is_finite() && self.sde_sigma >= 0.0) {
            return Err(("sde_sigma", "must be >= 0".into()));
        }
        if self.keyframe_gap == 0 {
            return Err(("keyframe_gap", "must be >= 1".into()));
        }
        if self.chunk_frames == 0 {
            return Err(("chunk_frames", "must be >= 1".into()));
        }
        if self.overlap == 0 || self.overlap >= self.chunk_frames {
            return Err(("overlap", format!("must lie in [1, chunk_frames), got {}", self.overlap)));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|(f, r)| Error::invalid(format!("infer.{f}: {r}")))
    }
}

/// Anything that predicts a bridge velocity for a clip.
pub trait VelocityField {
    fn velocity(&self, zt: &Tensor, t: f64, cond: &Conditioning, use_keyframes: bool) -> Result<Tensor>;

    fn supports_keyframes(&self) -> bool;

    fn dtype(&self) -> DType {
        DType::F32
    }

    fn device(&self) -> Device {
        Device::Cpu
    }
}

/// A trained forward model loaded from a checkpoint.
pub struct ForwardModel {
    pub net: RenderNet,
    pub stage: Stage,
    pub bridge: BridgeConfig,
    pub hash: String,
}

impl ForwardModel {
    pub fn from_checkpoint(ck: &Checkpoint, hash: &str) -> Result<Self> {
        Ok(Self {
            net: ck.build_net(DType::F32, &Device::Cpu)?,
            stage: ck.header.stage,
            bridge: ck.header.bridge.clone(),
            hash: hash.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (ck, hash) = Checkpoint::load(path)?;
        Self::from_checkpoint(&ck, &hash)
    }
}

impl VelocityField for ForwardModel {
    fn velocity(&self, zt: &Tensor, t: f64, cond: &Conditioning, use_keyframes: bool) -> Result<Tensor> {
        let b = zt.dim(0)?;
        self.net.forward(zt, &vec![t; b], cond, use_keyframes)
    }

    fn supports_keyframes(&self) -> bool {
        self.stage == Stage::Keyframe
    }

    fn dtype(&self) -> DType {
        self.net.dtype()
    }

    fn device(&self) -> Device {
        self.net.device().clone()
    }
}

/// Exact velocity towards a known target sequence; stands in for a perfect network.
pub struct OracleField {
    /// Ground truth per absolute frame, `[N, H, W, 3]`.
    pub target: Tensor,
    pub t_max: f64,
}

impl OracleField {
    pub fn for_sequence(seq: &Sequence, dtype: DType) -> Result<Self> {
        let idx: Vec<usize> = (0..seq.len()).collect();
        Ok(Self {
            target: reference_frames(seq, &idx, dtype, &Device::Cpu)?.squeeze(0)?,
            t_max: 1.0,
        })
    }
}

impl VelocityField for OracleField {
    fn velocity(&self, zt: &Tensor, t: f64, cond: &Conditioning, _: bool) -> Result<Tensor> {
        let rows = cond
            .frame_index
            .iter()
            .map(|idx| {
                let i = Tensor::new(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), &Device::Cpu)?;
                Ok(self.target.index_select(&i, 0)?.unsqueeze(0)?)
            })
            .collect::<Result<Vec<_>>>()?;
        velocity_target(&Tensor::cat(&rows, 0)?, zt, t, self.t_max)
    }

    fn supports_keyframes(&self) -> bool {
        true
    }

    fn dtype(&self) -> DType {
        self.target.dtype()
    }
}

#[derive(Debug, Clone)]
pub struct RenderResult {
    /// Clamped to `[0, 1]`, one per frame.
    pub images: Vec<Array3<f32>>,
    /// Unclamped model output `[F, H, W, 3]`.
    pub raw: Tensor,
    pub frame_ms: Vec<f64>,
    pub config: InferConfig,
}

/// Evaluation times for `steps` network calls.
pub fn time_points(bridge: &BridgeConfig, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 || steps > bridge.t_grid.len() {
        return Err(Error::invalid(format!(
            "{steps} steps requested but the time grid has {} points",
            bridge.t_grid.len()
        )));
    }
    Ok(bridge.t_grid[..steps].to_vec())
}

/// Integrates one clip from its albedo: `steps` evaluations on the time grid
/// followed by endpoint recovery at the last one.
pub fn render_clip(
    field: &dyn VelocityField,
    z0: &Tensor,
    cond: &Conditioning,
    cfg: &InferConfig,
    bridge: &BridgeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let ts = time_points(bridge, cfg.steps)?;
    let use_kf = cfg.use_keyframes && cond.keyframes.is_some();
    let mut z = z0.clone();
    for (i, &t) in ts.iter().enumerate() {
        let v = field.velocity(&z, t, cond, use_kf)?;
        z = match ts.get(i + 1) {
            None => recover_endpoint(&z, &v, t)?,
            Some(&next) => match cfg.mode {
                SamplerMode::Ode => ode_step(&z, &v, t, next - t)?,
                SamplerMode::Sde => sde_step(&z, &v, t, next, cfg.sde_sigma, rng)?,
            },
        };
    }
    Ok(z)
}

/// Chunk start frames: advance by `chunk − overlap` while the chunk does
/// not reach the end; the last start is pulled back to fit.
pub fn chunk_starts(len: usize, chunk: usize, overlap: usize) -> Vec<usize> {
    if len <= chunk {
        return vec![0];
    }
    let stride = chunk - overlap;
    let mut starts = vec![0];
    let mut s = 0;
    while s + chunk < len {
        s = (s + stride).min(len - chunk);
        starts.push(s);
    }
    starts
}

/// Non-overlapping chunk starts; the last chunk is pulled back to fit.
pub fn disjoint_chunk_starts(len: usize, chunk: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..len).step_by(chunk).map(|s| s.min(len.saturating_sub(chunk))).collect();
    starts.dedup();
    starts
}

/// Keyframes for `seq`: explicit indices, or every `gap`-th frame.
pub fn sequence_keyframes(seq: &Sequence, indices: &[usize], dtype: DType) -> Result<Keyframes> {
    Ok(Keyframes {
        images: reference_frames(seq, indices, dtype, &Device::Cpu)?,
        index: vec![indices.to_vec()],
    })
}

/// Renders a whole sequence in overlapping chunks. Frames already produced
/// by the previous chunk enter the next one as a masked reference clip and
/// are overwritten by the later chunk.
pub fn render_sequence(
    field: &dyn VelocityField,
    seq: &Sequence,
    cfg: &InferConfig,
    bridge: &BridgeConfig,
    keyframes: Option<&[usize]>,
) -> Result<RenderResult> {
    cfg.validate()?;
    if seq.is_empty() {
        return Err(Error::invalid("empty sequence"));
    }
    if cfg.use_keyframes && !field.supports_keyframes() {
        return Err(Error::Unsupported(
            "keyframe guidance needs a stage-2 (keyframe) checkpoint".into(),
        ));
    }
    let (dtype, dev) = (field.dtype(), field.device());
    let kf = if cfg.use_keyframes {
        let idx = match keyframes {
            Some(k) => k.to_vec(),
            None => keyframe_indices(seq.len(), cfg.keyframe_gap),
        };
        Some(sequence_keyframes(seq, &idx, dtype)?)
    } else {
        None
    };
    let chunk = cfg.chunk_frames.min(seq.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut out: Vec<Option<Tensor>> = vec![None; seq.len()];
    let mut frame_ms = vec![0.0; seq.len()];
    let mut done = 0;
    let starts = if cfg.progressive {
        chunk_starts(seq.len(), chunk, cfg.overlap)
    } else {
        disjoint_chunk_starts(seq.len(), chunk)
    };
    for start in starts {
        let clock = Instant::now();
        let clip = Clip::window(seq, start, chunk, dtype, &dev)?;
        let ref_clip = if cfg.progressive && done > start {
            let n = done - start;
            let prev: Vec<Tensor> = (start..start + chunk)
                .map(|i| match &out[i] {
                    Some(t) if i < done => Ok(t.clone()),
                    _ => Ok(clip.albedo.get(0)?.get(0)?.zeros_like()?),
                })
                .collect::<Result<_>>()?;
            Some(leading_ref_clip(&Tensor::stack(&prev, 0)?.unsqueeze(0)?, &[n])?)
        } else {
            None::<RefClip>
        };
        let cond = Conditioning {
            attributes: clip.attributes.clone(),
            env_ldr: clip.env_ldr.clone(),
            frame_index: clip.frame_index.clone(),
            ref_clip,
            keyframes: kf.clone(),
        };
        let z = render_clip(field, &clip.albedo, &cond, cfg, bridge, &mut rng)?.squeeze(0)?;
        let per_frame = clock.elapsed().as_secs_f64() * 1000.0 / chunk as f64;
        for k in 0..chunk {
            out[start + k] = Some(z.get(k)?);
            frame_ms[start + k] = per_frame;
        }
        done = start + chunk;
    }
    let frames: Vec<Tensor> = out.into_iter().map(|t| t.expect("every frame rendered")).collect();
    let raw = Tensor::stack(&frames, 0)?;
    let images = tensor_to_frames(&raw.clamp(0.0, 1.0)?)?;
    Ok(RenderResult {
        images,
        raw,
        frame_ms,
        config: cfg.clone(),
    })
}

/// Writes `value·255` rounded 8-bit PNGs named `{prefix}{index:04}.png`.
pub fn save_pngs(images: &[Array3<f32>], dir: &Path, prefix: &str) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let path = dir.join(format!("{prefix}{i:04}.png"));
            to_rgb8(img).save(&path)?;
            Ok(path)
        })
        .collect()
}

pub fn to_rgb8(img: &Array3<f32>) -> image::RgbImage {
    let (h, w, c) = img.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |k: usize| {
            let v = img[[y as usize, x as usize, k.min(c - 1)]];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Reads a PNG as `[H, W, 3]` values in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        f32::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    }))
}

/// Model output and reference concatenated horizontally.
pub fn side_by_side(left: &Array3<f32>, right: &Array3<f32>) -> Array3<f32> {
    ndarray::concatenate(ndarray::Axis(1), &[left.view(), right.view()]).expect("matching heights")
}

#[derive(Debug, Clone, Serialize)]
pub struct RenderMetadata<'a> {
    pub config: &'a InferConfig,
    pub frame_ms: &'a [f64],
    pub checkpoint_hash: &'a str,
    pub frames: usize,
}

pub fn write_metadata(path: &Path, result: &RenderResult, checkpoint_hash: &str) -> Result<()> {
    let meta = RenderMetadata {
        config: &result.config,
        frame_ms: &result.frame_ms,
        checkpoint_hash,
        frames: result.images.len(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamLogEntry {
    pub frame: usize,
    pub object: String,
    pub param: String,
    pub value: Vec<f64>,
}

pub struct EditResult {
    pub sequence: Sequence,
    pub render: RenderResult,
    pub log: Vec<ParamLogEntry>,
}

/// Synthesises a sequence whose material follows `edit` and renders it.
pub fn material_edit_demo(
    field: &dyn VelocityField,
    scene_seed: u64,
    synth: &SynthConfig,
    edit: MaterialInterp,
    cfg: &InferConfig,
    bridge: &BridgeConfig,
) -> Result<EditResult> {
    let synth = SynthConfig {
        material_interp: Some(edit.clone()),
        ..synth.clone()
    };
    let sequence = synth_sequence(scene_seed, &synth)?;
    let render = render_sequence(field, &sequence, cfg, bridge, None)?;
    let log = (0..synth.frames)
        .map(|f| ParamLogEntry {
            frame: f,
            object: edit.object.clone(),
            param: edit.param.to_string(),
            value: edit.value_at(f, synth.frames),
        })
        .collect();
    Ok(EditResult { sequence, render, log })
}
