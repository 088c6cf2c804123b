use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CameraPose, EnvMap, Frame, GBufferFrame, MaterialInterp, Sequence, SynthConfig};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"RFSQ";
const VERSION: u32 = 1;
pub const SEQUENCE_EXT: &str = "rfsq";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct Trailer {
    seed: u64,
    camera_poses: Vec<CameraPose>,
    material_interp: Option<MaterialInterp>,
}

fn push_array(buf: &mut Vec<u8>, a: &Array3<f32>) {
    // Arrays built by this crate are standard-layout; iter() is row-major either way.
    for v in a.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialises a sequence to the `RFSQ` v1 layout.
pub fn write_sequence(seq: &Sequence, path: &Path) -> Result<()> {
    if seq.is_empty() || seq.envmap_ldr.len() != seq.len() {
        return Err(Error::invalid("sequence frames and envmap_ldr must be non-empty and aligned"));
    }
    let res = seq.resolution();
    let (eh, ew) = (seq.envmap.height(), seq.envmap.width());
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    for v in [VERSION, seq.len() as u32, res.height as u32, res.width as u32, eh as u32, ew as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for (fr, ldr) in seq.frames.iter().zip(&seq.envmap_ldr) {
        let g = &fr.gbuffer;
        if g.resolution() != res || ldr.dim() != (eh, ew, 3) {
            return Err(Error::invalid("frames must share one resolution"));
        }
        for a in [&g.albedo, &g.normal, &g.depth, &g.material, &g.hit_mask, &fr.reference, ldr] {
            push_array(&mut buf, a);
        }
    }
    push_array(&mut buf, &seq.envmap.hdr);
    let trailer = Trailer {
        seed: seq.seed,
        camera_poses: seq.frames.iter().map(|f| f.pose).collect(),
        material_interp: seq.material_interp.clone(),
    };
    serde_json::to_writer(&mut buf, &trailer)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::corrupt(self.path, "truncated payload"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn array(&mut self, h: usize, w: usize, c: usize) -> Result<Array3<f32>> {
        let b = self.take(h * w * c * 4)?;
        let data = b
            .chunks_exact(4)
            .map(|q| f32::from_le_bytes([q[0], q[1], q[2], q[3]]))
            .collect();
        Ok(Array3::from_shape_vec((h, w, c), data).expect("size checked"))
    }
}

pub fn read_sequence(path: &Path) -> Result<Sequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut rd = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if rd.take(4)? != MAGIC {
        return Err(Error::corrupt(path, "bad magic"));
    }
    let version = rd.u32()?;
    if version != VERSION {
        return Err(Error::corrupt(path, format!("unsupported version {version}")));
    }
    let f = rd.u32()? as usize;
    let (h, w) = (rd.u32()? as usize, rd.u32()? as usize);
    let (eh, ew) = (rd.u32()? as usize, rd.u32()? as usize);
    if f == 0 || h == 0 || w == 0 || eh == 0 || ew == 0 {
        return Err(Error::corrupt(path, "zero-sized dimension"));
    }
    let per_frame = h * w * (3 + 3 + 1 + 3 + 1 + 3) + eh * ew * 3;
    if (f * per_frame + eh * ew * 3) * 4 > bytes.len() {
        return Err(Error::corrupt(path, "truncated payload"));
    }
    let mut frames = Vec::with_capacity(f);
    let mut envmap_ldr = Vec::with_capacity(f);
    for _ in 0..f {
        let gbuffer = GBufferFrame {
            albedo: rd.array(h, w, 3)?,
            normal: rd.array(h, w, 3)?,
            depth: rd.array(h, w, 1)?,
            material: rd.array(h, w, 3)?,
            hit_mask: rd.array(h, w, 1)?,
        };
        let reference = rd.array(h, w, 3)?;
        envmap_ldr.push(rd.array(eh, ew, 3)?);
        frames.push((gbuffer, reference));
    }
    let hdr = rd.array(eh, ew, 3)?;
    let envmap = EnvMap::new(hdr).map_err(|e| Error::corrupt(path, e.to_string()))?;
    let trailer: Trailer = serde_json::from_slice(&bytes[rd.pos..])
        .map_err(|e| Error::corrupt(path, format!("trailer: {e}")))?;
    if trailer.camera_poses.len() != f {
        return Err(Error::corrupt(path, "pose count does not match frame count"));
    }
    Ok(Sequence {
        frames: frames
            .into_iter()
            .zip(trailer.camera_poses)
            .map(|((gbuffer, reference), pose)| Frame {
                gbuffer,
                reference,
                pose,
            })
            .collect(),
        envmap,
        envmap_ldr,
        seed: trailer.seed,
        material_interp: trailer.material_interp,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub path: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub sequences: Vec<DatasetEntry>,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::corrupt(&path, e.to_string()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }
}

fn split_for(i: usize, n: usize) -> Split {
    if n < 3 {
        return Split::Train;
    }
    let held = (n / 10).max(1);
    if i >= n - held {
        Split::Test
    } else if i >= n - 2 * held {
        Split::Val
    } else {
        Split::Train
    }
}

/// Synthesises `n` sequences into `dir` (in parallel) and writes the manifest.
pub fn synth_dataset(dir: &Path, seed: u64, n: usize, cfg: &SynthConfig) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::invalid("dataset needs at least one sequence"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries = (0..n)
        .into_par_iter()
        .map(|i| {
            let seq = super::synth_sequence(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), cfg)?;
            let name = format!("seq{i}.{SEQUENCE_EXT}");
            write_sequence(&seq, &dir.join(&name))?;
            Ok(DatasetEntry {
                path: name,
                split: split_for(i, n),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest { sequences: entries };
    manifest.save(dir)?;
    Ok(manifest)
}

/// In-memory dataset: every sequence of a manifest, tagged by split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub sequences: Vec<(String, Split, Sequence)>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        let sequences = manifest
            .sequences
            .par_iter()
            .map(|e| Ok((e.path.clone(), e.split, read_sequence(&dir.join(&e.path))?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            root: dir.to_path_buf(),
            sequences,
        })
    }

    pub fn from_sequences(seqs: Vec<(Split, Sequence)>) -> Self {
        Self {
            root: PathBuf::new(),
            sequences: seqs
                .into_iter()
                .enumerate()
                .map(|(i, (s, q))| (format!("seq{i}.{SEQUENCE_EXT}"), s, q))
                .collect(),
        }
    }

    pub fn split(&self, split: Split) -> Vec<&Sequence> {
        self.sequences
            .iter()
            .filter(|(_, s, _)| *s == split)
            .map(|(_, _, q)| q)
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}
