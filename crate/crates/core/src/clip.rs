//! Conversion between stored sequences and batched `[B, F, H, W, C]` tensors.

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;

use crate::scene::Sequence;
use crate::{Error, Result};

/// A batch of clips. Every tensor is `[B, F, H, W, C]`.
#[derive(Debug, Clone)]
pub struct Clip {
    pub albedo: Tensor,
    pub reference: Tensor,
    /// normal (3), depth (1), material (3), hit mask (1).
    pub attributes: Tensor,
    pub env_ldr: Tensor,
    pub frame_index: Vec<Vec<usize>>,
}

pub fn array_to_tensor(a: &Array3<f32>, dtype: DType, device: &Device) -> Result<Tensor> {
    let a = a.as_standard_layout();
    let t = Tensor::from_slice(a.as_slice().expect("standard layout"), a.dim(), device)?;
    Ok(t.to_dtype(dtype)?)
}

pub fn tensor_to_array(t: &Tensor) -> Result<Array3<f32>> {
    let (h, w, c) = t.dims3()?;
    let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(Array3::from_shape_vec((h, w, c), v).expect("shape matches"))
}

/// `[F, H, W, C]` tensor to per-frame arrays.
pub fn tensor_to_frames(t: &Tensor) -> Result<Vec<Array3<f32>>> {
    (0..t.dim(0)?).map(|i| tensor_to_array(&t.get(i)?)).collect()
}

fn stack_frames(frames: &[&Array3<f32>], dtype: DType, device: &Device) -> Result<Tensor> {
    let ts = frames
        .iter()
        .map(|a| array_to_tensor(a, dtype, device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?.unsqueeze(0)?)
}

impl Clip {
    /// Gathers the given frame indices of `seq` into a batch of one.
    pub fn from_sequence(seq: &Sequence, indices: &[usize], dtype: DType, device: &Device) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("clip needs at least one frame"));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= seq.len()) {
            return Err(Error::invalid(format!("frame {i} out of range for sequence of {}", seq.len())));
        }
        let frames: Vec<_> = indices.iter().map(|&i| &seq.frames[i]).collect();
        let gather = |f: fn(&crate::scene::Frame) -> &Array3<f32>| -> Result<Tensor> {
            let arrs: Vec<&Array3<f32>> = frames.iter().map(|fr| f(fr)).collect();
            stack_frames(&arrs, dtype, device)
        };
        let attributes = Tensor::cat(
            &[
                gather(|f| &f.gbuffer.normal)?,
                gather(|f| &f.gbuffer.depth)?,
                gather(|f| &f.gbuffer.material)?,
                gather(|f| &f.gbuffer.hit_mask)?,
            ],
            4,
        )?;
        let envs: Vec<&Array3<f32>> = indices.iter().map(|&i| &seq.envmap_ldr[i]).collect();
        Ok(Self {
            albedo: gather(|f| &f.gbuffer.albedo)?,
            reference: gather(|f| &f.reference)?,
            attributes,
            env_ldr: stack_frames(&envs, dtype, device)?,
            frame_index: vec![indices.to_vec()],
        })
    }

    /// Contiguous frames `start..start + len`.
    pub fn window(seq: &Sequence, start: usize, len: usize, dtype: DType, device: &Device) -> Result<Self> {
        let idx: Vec<usize> = (start..start + len).collect();
        Self::from_sequence(seq, &idx, dtype, device)
    }

    pub fn cat(clips: &[Clip]) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let cat = |f: &dyn Fn(&Clip) -> &Tensor| -> Result<Tensor> {
            let ts: Vec<&Tensor> = clips.iter().map(f).collect();
            Ok(Tensor::cat(&ts, 0)?)
        };
        Ok(Self {
            albedo: cat(&|c| &c.albedo)?,
            reference: cat(&|c| &c.reference)?,
            attributes: cat(&|c| &c.attributes)?,
            env_ldr: cat(&|c| &c.env_ldr)?,
            frame_index: clips.iter().flat_map(|c| c.frame_index.clone()).collect(),
        })
    }

    pub fn batch(&self) -> usize {
        self.frame_index.len()
    }

    pub fn frames(&self) -> usize {
        self.frame_index.first().map_or(0, Vec::len)
    }

    /// Channel slices of the attribute stack.
    pub fn normal(&self) -> Result<Tensor> {
        Ok(self.attributes.narrow(4, 0, 3)?)
    }

    pub fn depth(&self) -> Result<Tensor> {
        Ok(self.attributes.narrow(4, 3, 1)?)
    }

    pub fn material(&self) -> Result<Tensor> {
        Ok(self.attributes.narrow(4, 4, 3)?)
    }

    pub fn hit_mask(&self) -> Result<Tensor> {
        Ok(self.attributes.narrow(4, 7, 1)?)
    }
}

/// Reference images of the given frames as `[1, K, H, W, 3]`.
pub fn reference_frames(seq: &Sequence, indices: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    if let Some(&i) = indices.iter().find(|&&i| i >= seq.len()) {
        return Err(Error::invalid(format!("keyframe {i} out of range for sequence of {}", seq.len())));
    }
    if indices.is_empty() {
        let r = seq.resolution();
        return Ok(Tensor::zeros((1, 0, r.height, r.width, 3), dtype, device)?);
    }
    let arrs: Vec<&Array3<f32>> = indices.iter().map(|&i| &seq.frames[i].reference).collect();
    stack_frames(&arrs, dtype, device)
}
