use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::AdamW;
use crate::bridge::BridgeConfig;
use crate::net::{GroupMask, NetConfig, ParamGroup, RenderNet};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RFCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Base,
    Keyframe,
    Inverse,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Base => "base",
            Stage::Keyframe => "keyframe",
            Stage::Inverse => "inverse",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    /// Offset in f32 elements from the start of the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseMeta {
    pub lora_rank: usize,
    pub prompt_tokens: usize,
    pub seed: u64,
    /// SHA-256 of the frozen forward checkpoint this adapter was trained on.
    pub forward_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub step: usize,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub stage: Stage,
    pub step: usize,
    pub net: NetConfig,
    pub bridge: BridgeConfig,
    /// Snapshot of the training configuration that produced the weights.
    pub train: serde_json::Value,
    pub inverse: Option<InverseMeta>,
    pub optimizer: Option<OptimizerMeta>,
    pub params: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub payload: Vec<f32>,
    /// First and second moments, manifest order, when an optimizer was saved.
    pub moments: Option<(Vec<f32>, Vec<f32>)>,
}

fn flat_f32(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
}

impl Checkpoint {
    /// Snapshots the parameters of `groups` (and the matching moments).
    pub fn capture(
        net: &RenderNet,
        groups: GroupMask,
        stage: Stage,
        step: usize,
        bridge: &BridgeConfig,
        train: serde_json::Value,
        inverse: Option<InverseMeta>,
        opt: Option<&AdamW>,
    ) -> Result<Self> {
        let mut params = Vec::new();
        let mut payload = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (i, p) in net.params().iter().enumerate() {
            if !groups.contains(p.group) {
                continue;
            }
            params.push(ManifestEntry {
                name: p.name.clone(),
                group: p.group,
                shape: p.var.dims().to_vec(),
                offset: payload.len(),
            });
            payload.extend(flat_f32(p.var.as_tensor())?);
            if let Some(o) = opt {
                m.extend(flat_f32(&o.m[i])?);
                v.extend(flat_f32(&o.v[i])?);
            }
        }
        Ok(Self {
            header: CheckpointHeader {
                stage,
                step,
                net: net.config().clone(),
                bridge: bridge.clone(),
                train,
                inverse,
                optimizer: opt.map(|o| OptimizerMeta {
                    step: o.step,
                    weight_decay: o.weight_decay,
                }),
                params,
            },
            payload,
            moments: opt.map(|_| (m, v)),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(12 + header.len() + 12 * self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let mut put = |xs: &[f32]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        put(&self.payload);
        if let Some((m, v)) = &self.moments {
            put(m);
            put(v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |r: &str| Error::corrupt(path, r);
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("missing RFCK magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let hend = 12usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[12..hend]).map_err(|e| bad(&format!("bad header: {e}")))?;
        let n: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
        let mut expected = n;
        let mut offset = 0;
        for p in &header.params {
            if p.offset != offset {
                return Err(bad(&format!("manifest offset mismatch at `{}`", p.name)));
            }
            offset += p.shape.iter().product::<usize>();
        }
        if header.optimizer.is_some() {
            expected *= 3;
        }
        let body = &bytes[hend..];
        if body.len() != expected * 4 {
            return Err(bad(&format!("payload has {} bytes, expected {}", body.len(), expected * 4)));
        }
        let floats: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let payload = floats[..n].to_vec();
        let moments = header
            .optimizer
            .as_ref()
            .map(|_| (floats[n..2 * n].to_vec(), floats[2 * n..].to_vec()));
        Ok(Self {
            header,
            payload,
            moments,
        })
    }

    /// Writes the file and returns its SHA-256.
    pub fn save(&self, path: &Path) -> Result<String> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    /// Loads a checkpoint and the SHA-256 of its bytes.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::from_bytes(&bytes, path)?, sha256_hex(&bytes)))
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }

    /// Copies every manifest entry into the same-named parameter of `net`.
    pub fn apply_to(&self, net: &RenderNet) -> Result<()> {
        for e in &self.header.params {
            let p = net
                .store()
                .get(&e.name)
                .ok_or_else(|| Error::invalid(format!("network has no parameter `{}`", e.name)))?;
            if p.var.dims() != e.shape.as_slice() || p.group != e.group {
                return Err(Error::invalid(format!("parameter `{}` does not match the network", e.name)));
            }
            let n: usize = e.shape.iter().product();
            let t = Tensor::from_slice(&self.payload[e.offset..e.offset + n], e.shape.as_slice(), net.device())?
                .to_dtype(net.dtype())?;
            p.var.set(&t)?;
        }
        Ok(())
    }

    /// Forward network restored from a base or keyframe checkpoint.
    pub fn build_net(&self, dtype: DType, device: &Device) -> Result<RenderNet> {
        if self.header.stage == Stage::Inverse {
            return Err(Error::Unsupported("inverse checkpoints hold adapter weights only".into()));
        }
        let net = RenderNet::new(self.header.net.clone(), dtype, device)?;
        self.apply_to(&net)?;
        Ok(net)
    }

    /// Optimizer state aligned with `net`'s parameter order.
    pub fn optimizer(&self, net: &RenderNet) -> Result<Option<AdamW>> {
        let (Some(meta), Some((m, v))) = (&self.header.optimizer, &self.moments) else {
            return Ok(None);
        };
        let mut opt = AdamW::new(net.params(), meta.weight_decay)?;
        opt.step = meta.step;
        for e in &self.header.params {
            let i = net
                .params()
                .iter()
                .position(|p| p.name == e.name)
                .ok_or_else(|| Error::invalid(format!("network has no parameter `{}`", e.name)))?;
            let n: usize = e.shape.iter().product();
            let mk = |xs: &[f32]| -> Result<Tensor> {
                Ok(Tensor::from_slice(&xs[e.offset..e.offset + n], e.shape.as_slice(), net.device())?
                    .to_dtype(net.dtype())?)
            };
            opt.m[i] = mk(m)?;
            opt.v[i] = mk(v)?;
        }
        Ok(Some(opt))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Conditioning, NetConfig};

    fn cfg() -> NetConfig {
        NetConfig {
            patch: 4,
            dim: 16,
            depth: 1,
            heads: 2,
            height: 8,
            width: 8,
            env_height: 4,
            env_width: 8,
            env_patch: 2,
            ..Default::default()
        }
    }

    fn forward(net: &RenderNet) -> Vec<f32> {
        let dev = Device::Cpu;
        let zt = Tensor::ones((1, 2, 8, 8, 3), DType::F32, &dev).unwrap();
        let cond = Conditioning {
            attributes: Tensor::full(0.5f32, (1, 2, 8, 8, 8), &dev).unwrap(),
            env_ldr: Tensor::full(0.3f32, (1, 2, 4, 8, 3), &dev).unwrap(),
            frame_index: vec![vec![0, 1]],
            ref_clip: None,
            keyframes: None,
        };
        net.forward(&zt, &[0.25], &cond, false).unwrap().flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn round_trip_reproduces_outputs() {
        let net = RenderNet::new(cfg(), DType::F32, &Device::Cpu).unwrap();
        for p in net.params() {
            let t = (p.var.as_tensor().ones_like().unwrap() * 0.05).unwrap();
            p.var.set(&(p.var.as_tensor() + t).unwrap()).unwrap();
        }
        let opt = AdamW::new(net.params(), 0.01).unwrap();
        let ck = Checkpoint::capture(&net, GroupMask::ALL, Stage::Base, 7, &BridgeConfig::default(), serde_json::json!({}), None, Some(&opt)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.rfck");
        let h = ck.save(&path).unwrap();
        let (back, h2) = Checkpoint::load(&path).unwrap();
        assert_eq!(h, h2);
        assert_eq!(back.header, ck.header);
        let net2 = back.build_net(DType::F32, &Device::Cpu).unwrap();
        assert_eq!(forward(&net), forward(&net2));
        assert!(back.optimizer(&net2).unwrap().is_some());
    }

    #[test]
    fn corruption_detected() {
        let net = RenderNet::new(cfg(), DType::F32, &Device::Cpu).unwrap();
        let ck = Checkpoint::capture(&net, GroupMask::ALL, Stage::Base, 0, &BridgeConfig::default(), serde_json::Value::Null, None, None).unwrap();
        let bytes = ck.to_bytes().unwrap();
        let p = Path::new("x");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad, p).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(Error::CorruptFile { .. })));
        assert_eq!(&bytes[..4], b"RFCK");
    }
}
