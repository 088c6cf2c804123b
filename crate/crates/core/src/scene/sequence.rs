use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    gen_envmap, gen_scene, rasterize_gbuffers, rasterize_with_ids, render_reference, tonemap_rotate, CameraPose,
    EnvMap, GBufferFrame, Resolution, SceneSpec, DEFAULT_DEPTH_MAX,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaterialParam {
    Albedo,
    Roughness,
    Metallic,
    Specular,
}

impl std::str::FromStr for MaterialParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "albedo" => Ok(Self::Albedo),
            "roughness" => Ok(Self::Roughness),
            "metallic" => Ok(Self::Metallic),
            "specular" => Ok(Self::Specular),
            other => Err(Error::invalid(format!("unknown material parameter `{other}`"))),
        }
    }
}

impl std::fmt::Display for MaterialParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Albedo => "albedo",
            Self::Roughness => "roughness",
            Self::Metallic => "metallic",
            Self::Specular => "specular",
        })
    }
}

/// Linear interpolation of one material parameter of one object across the
/// frames of a sequence. Scalar parameters use one value, albedo uses three.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialInterp {
    pub object: String,
    pub param: MaterialParam,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl MaterialInterp {
    fn arity(&self) -> usize {
        match self.param {
            MaterialParam::Albedo => 3,
            _ => 1,
        }
    }

    /// Parameter value at `frame` of `frames`.
    pub fn value_at(&self, frame: usize, frames: usize) -> Vec<f64> {
        let s = if frames > 1 {
            frame as f64 / (frames - 1) as f64
        } else {
            0.0
        };
        self.start
            .iter()
            .zip(&self.end)
            .map(|(a, b)| a + s * (b - a))
            .collect()
    }

    fn validate(&self, scene: &SceneSpec) -> Result<usize> {
        let idx = scene
            .object_index(&self.object)
            .ok_or_else(|| Error::invalid(format!("unknown object `{}`", self.object)))?;
        if self.start.len() != self.arity() || self.end.len() != self.arity() {
            return Err(Error::invalid(format!(
                "{:?} interpolation needs {} value(s) per endpoint",
                self.param,
                self.arity()
            )));
        }
        if self
            .start
            .iter()
            .chain(&self.end)
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::invalid("interpolation endpoints must lie in [0, 1]"));
        }
        Ok(idx)
    }

    fn apply(&self, scene: &mut SceneSpec, idx: usize, frame: usize, frames: usize) {
        let v = self.value_at(frame, frames);
        let m = &mut scene.objects[idx].material;
        match self.param {
            MaterialParam::Albedo => m.albedo = [v[0], v[1], v[2]],
            MaterialParam::Roughness => m.roughness = v[0],
            MaterialParam::Metallic => m.metallic = v[0],
            MaterialParam::Specular => m.specular = v[0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub env_height: usize,
    pub env_width: usize,
    /// Objects per scene; 0 draws a count in [2, 5] from the seed.
    pub n_objects: usize,
    pub orbit_radius: f64,
    pub camera_height: f64,
    pub orbit_step_deg: f64,
    pub fov_deg: f64,
    pub depth_max: f64,
    #[serde(skip)]
    pub material_interp: Option<MaterialInterp>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 5,
            height: 64,
            width: 64,
            env_height: 16,
            env_width: 32,
            n_objects: 0,
            orbit_radius: 4.5,
            camera_height: 1.8,
            orbit_step_deg: 6.0,
            fov_deg: 45.0,
            depth_max: DEFAULT_DEPTH_MAX,
            material_interp: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub gbuffer: GBufferFrame,
    /// Tonemapped ground-truth image, `H×W×3` in `[0, 1)`.
    pub reference: Array3<f32>,
    pub pose: CameraPose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Frame>,
    pub envmap: EnvMap,
    /// Camera-rotated tonemapped envmap, one per frame.
    pub envmap_ldr: Vec<Array3<f32>>,
    pub seed: u64,
    pub material_interp: Option<MaterialInterp>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn resolution(&self) -> Resolution {
        self.frames[0].gbuffer.resolution()
    }
}

pub(crate) fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.random()
}

/// The scene used by [`synth_sequence`] for `seed`.
pub fn scene_for(seed: u64, cfg: &SynthConfig) -> Result<SceneSpec> {
    let n = if cfg.n_objects == 0 {
        ChaCha8Rng::seed_from_u64(derive_seed(seed, 1)).random_range(2..=5)
    } else {
        cfg.n_objects
    };
    gen_scene(derive_seed(seed, 2), n)
}

pub(crate) fn orbit_pose(seed: u64, cfg: &SynthConfig, frame: usize) -> CameraPose {
    let start = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3)).random_range(0.0..std::f64::consts::TAU);
    let angle = start + (frame as f64) * cfg.orbit_step_deg.to_radians();
    CameraPose {
        position: [
            cfg.orbit_radius * angle.cos(),
            cfg.camera_height,
            cfg.orbit_radius * angle.sin(),
        ],
        look_at: [0.0, 0.35, 0.0],
        fov_deg: cfg.fov_deg,
        frame_index: frame,
    }
}

/// Renders an orbiting-camera clip of a seeded scene.
pub fn synth_sequence(seed: u64, cfg: &SynthConfig) -> Result<Sequence> {
    if cfg.frames == 0 {
        return Err(Error::invalid("sequence needs at least one frame"));
    }
    if cfg.height < 16 || cfg.width < 16 {
        return Err(Error::invalid(format!("resolution {}x{} below 16", cfg.height, cfg.width)));
    }
    let base = scene_for(seed, cfg)?;
    if cfg.orbit_radius <= base.extent() {
        return Err(Error::invalid(format!(
            "orbit radius {} intersects the scene (extent {:.3})",
            cfg.orbit_radius,
            base.extent()
        )));
    }
    let interp_idx = cfg
        .material_interp
        .as_ref()
        .map(|mi| mi.validate(&base))
        .transpose()?;
    let envmap = gen_envmap(derive_seed(seed, 4), cfg.env_height, cfg.env_width)?;
    let res = Resolution::new(cfg.height, cfg.width);
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut envmap_ldr = Vec::with_capacity(cfg.frames);
    for f in 0..cfg.frames {
        let pose = orbit_pose(seed, cfg, f);
        pose.validate()?;
        let mut scene = base.clone();
        if let (Some(mi), Some(idx)) = (&cfg.material_interp, interp_idx) {
            mi.apply(&mut scene, idx, f, cfg.frames);
        }
        frames.push(Frame {
            gbuffer: rasterize_gbuffers(&scene, &pose, res, cfg.depth_max),
            reference: render_reference(&scene, &envmap, &pose, res),
            pose,
        });
        envmap_ldr.push(tonemap_rotate(&envmap, &pose));
    }
    Ok(Sequence {
        frames,
        envmap,
        envmap_ldr,
        seed,
        material_interp: cfg.material_interp.clone(),
    })
}

/// Per-frame pixel masks of `object` in the sequence [`synth_sequence`]
/// produces for `(seed, cfg)`.
pub fn object_masks(seed: u64, cfg: &SynthConfig, object: &str) -> Result<Vec<Array2<bool>>> {
    let scene = scene_for(seed, cfg)?;
    let idx = scene
        .object_index(object)
        .ok_or_else(|| Error::invalid(format!("scene has no object `{object}`")))? as i32;
    let res = Resolution::new(cfg.height, cfg.width);
    Ok((0..cfg.frames)
        .map(|f| {
            let (_, ids) = rasterize_with_ids(&scene, &orbit_pose(seed, cfg, f), res, cfg.depth_max);
            ids.mapv(|i| i == idx)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            frames: 5,
            height: 16,
            width: 16,
            env_height: 8,
            env_width: 16,
            n_objects: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn single_frame_sequence_is_valid() {
        let seq = synth_sequence(1, &SynthConfig { frames: 1, ..small() }).unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(seq.envmap_ldr.len(), 1);
    }

    #[test]
    fn zero_frames_rejected() {
        assert!(synth_sequence(1, &SynthConfig { frames: 0, ..small() }).is_err());
    }

    #[test]
    fn roughness_interpolation_hits_endpoints() {
        let cfg0 = SynthConfig { height: 32, width: 32, ..small() };
        let scene = scene_for(4, &cfg0).unwrap();
        let name = scene.objects[0].name.clone();
        let cfg = SynthConfig {
            material_interp: Some(MaterialInterp {
                object: name,
                param: MaterialParam::Roughness,
                start: vec![1.0],
                end: vec![0.0],
            }),
            ..cfg0.clone()
        };
        let seq = synth_sequence(4, &cfg).unwrap();
        for (f, expect) in [(0usize, 1.0f32), (2, 0.5), (4, 0.0)] {
            let (_, ids) = rasterize_with_ids(&scene, &seq.frames[f].pose, Resolution::new(32, 32), cfg.depth_max);
            let mut seen = 0;
            for ((r, c), &id) in ids.indexed_iter() {
                if id == 0 {
                    assert_eq!(seq.frames[f].gbuffer.material[[r, c, 0]], expect);
                    seen += 1;
                }
            }
            assert!(seen > 0, "object not visible in frame {f}");
        }
    }

    #[test]
    fn static_materials_shared_across_frames() {
        let cfg = SynthConfig { height: 32, width: 32, ..small() };
        let scene = scene_for(6, &cfg).unwrap();
        let seq = synth_sequence(6, &cfg).unwrap();
        for (i, obj) in scene.objects.iter().enumerate() {
            for fr in &seq.frames {
                let (_, ids) = rasterize_with_ids(&scene, &fr.pose, Resolution::new(32, 32), cfg.depth_max);
                for ((r, c), &id) in ids.indexed_iter() {
                    if id == i as i32 {
                        assert_eq!(fr.gbuffer.material[[r, c, 0]], obj.material.roughness as f32);
                        assert_eq!(fr.gbuffer.material[[r, c, 1]], obj.material.metallic as f32);
                    }
                }
            }
        }
    }

    #[test]
    fn unknown_object_or_bad_arity_rejected() {
        let mut cfg = small();
        cfg.material_interp = Some(MaterialInterp {
            object: "cone7".into(),
            param: MaterialParam::Roughness,
            start: vec![1.0],
            end: vec![0.0],
        });
        assert!(matches!(synth_sequence(0, &cfg), Err(Error::InvalidArgument(_))));
        let name = scene_for(0, &small()).unwrap().objects[0].name.clone();
        cfg.material_interp = Some(MaterialInterp {
            object: name,
            param: MaterialParam::Albedo,
            start: vec![1.0],
            end: vec![0.0],
        });
        assert!(synth_sequence(0, &cfg).is_err());
        assert!("glossiness".parse::<MaterialParam>().is_err());
    }

    #[test]
    fn synthesis_is_deterministic() {
        assert_eq!(synth_sequence(3, &small()).unwrap(), synth_sequence(3, &small()).unwrap());
    }
}
