//! Procedural scenes and the desk-scale data pipeline.
//!
//! Everything here is a pure function of a seed and a config: scenes are made
//! of spheres and boxes resting on a ground plane, lit by a procedural
//! lat-long environment map. The reference renderer treats every envmap texel
//! as a directional light and sums all of them, so images are noise free and
//! bitwise reproducible.

mod envmap;
mod geometry;
mod io;
mod raster;
mod sequence;
mod shading;

pub use envmap::{gen_envmap, reinhard, tonemap_rotate, EnvMap};
pub use geometry::{camera_ray, CameraBasis, Hit, Ray, Vec3};
pub use io::{
    read_sequence, synth_dataset, write_sequence, Dataset, DatasetEntry, DatasetManifest, Split,
    MANIFEST_FILE, SEQUENCE_EXT,
};
pub use raster::{decode_normal, encode_normal, rasterize_gbuffers, rasterize_with_ids, GBufferFrame};
pub use sequence::{
    object_masks, scene_for, synth_sequence, Frame, MaterialInterp, MaterialParam, Sequence, SynthConfig,
};
pub use shading::{brdf, render_reference, render_reference_linear, visible};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default normalisation distance for the depth buffer.
pub const DEFAULT_DEPTH_MAX: f64 = 10.0;

/// Objects are placed inside this radius around the origin.
pub const SCENE_RADIUS: f64 = 1.6;

const MAX_OBJECT_SIZE: f64 = 0.6;
const MIN_OBJECT_SIZE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Sphere,
    /// Axis-aligned cube; `size` is the half extent.
    Box,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Sphere => "sphere",
            Shape::Box => "box",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub albedo: [f64; 3],
    pub roughness: f64,
    pub metallic: f64,
    pub specular: f64,
}

impl Material {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !self.albedo.iter().all(|&c| in_unit(c)) {
            return Err(Error::invalid(format!("albedo {:?} outside [0,1]", self.albedo)));
        }
        for (name, v) in [
            ("roughness", self.roughness),
            ("metallic", self.metallic),
            ("specular", self.specular),
        ] {
            if !in_unit(v) {
                return Err(Error::invalid(format!("{name} {v} outside [0,1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub name: String,
    pub shape: Shape,
    pub center: [f64; 3],
    /// Sphere radius or cube half extent, in world units.
    pub size: f64,
    pub material: Material,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundPlane {
    pub height: f64,
    pub material: Material,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    pub ground: GroundPlane,
}

impl SceneSpec {
    /// Largest distance from the origin reached by any object.
    pub fn extent(&self) -> f64 {
        self.objects
            .iter()
            .map(|o| {
                let c = o.center;
                let r = match o.shape {
                    Shape::Sphere => o.size,
                    Shape::Box => o.size * 3f64.sqrt(),
                };
                (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt() + r
            })
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::invalid("scene has no objects"));
        }
        for o in &self.objects {
            if !(o.size > 0.0) {
                return Err(Error::invalid(format!("object {} has size {}", o.name, o.size)));
            }
            o.material.validate()?;
        }
        self.ground.material.validate()
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub fov_deg: f64,
    pub frame_index: usize,
}

impl CameraPose {
    pub fn validate(&self) -> Result<()> {
        if self.position == self.look_at {
            return Err(Error::invalid("camera position equals look_at"));
        }
        if !(self.fov_deg > 10.0 && self.fov_deg < 120.0) {
            return Err(Error::invalid(format!("fov {} outside (10, 120)", self.fov_deg)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub height: usize,
    pub width: usize,
}

impl Resolution {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }
}

/// Random primitive scene with `n_objects` objects resting on the ground.
pub fn gen_scene(seed: u64, n_objects: usize) -> Result<SceneSpec> {
    if !(1..=8).contains(&n_objects) {
        return Err(Error::invalid(format!("n_objects {n_objects} outside [1, 8]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ground_height = 0.0;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n_objects);
    for i in 0..n_objects {
        let shape = if rng.random_bool(0.5) { Shape::Sphere } else { Shape::Box };
        let size = rng.random_range(MIN_OBJECT_SIZE..MAX_OBJECT_SIZE);
        let bound = match shape {
            Shape::Sphere => size,
            Shape::Box => size * 2f64.sqrt(),
        };
        // Rejection sampling on the ground disk; fall back to the last draw if crowded.
        let mut xz = (0.0, 0.0);
        for _ in 0..64 {
            let r = SCENE_RADIUS * rng.random::<f64>().sqrt();
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            xz = (r * phi.cos(), r * phi.sin());
            let clear = objects.iter().all(|o| {
                let ob = match o.shape {
                    Shape::Sphere => o.size,
                    Shape::Box => o.size * 2f64.sqrt(),
                };
                let dx = o.center[0] - xz.0;
                let dz = o.center[2] - xz.1;
                (dx * dx + dz * dz).sqrt() > ob + bound + 0.05
            });
            if clear {
                break;
            }
        }
        let metallic = if rng.random_bool(0.3) {
            rng.random_range(0.5..=1.0)
        } else {
            rng.random_range(0.0..=0.2)
        };
        objects.push(SceneObject {
            name: format!("{}{}", shape.name(), i),
            shape,
            center: [xz.0, ground_height + size, xz.1],
            size,
            material: Material {
                albedo: [
                    rng.random_range(0.1..=0.95),
                    rng.random_range(0.1..=0.95),
                    rng.random_range(0.1..=0.95),
                ],
                roughness: rng.random_range(0.0..=1.0),
                metallic,
                specular: rng.random_range(0.2..=1.0),
            },
        });
    }
    let grey = rng.random_range(0.3..=0.8);
    let tint: [f64; 3] = [
        grey * rng.random_range(0.85..=1.0),
        grey * rng.random_range(0.85..=1.0),
        grey * rng.random_range(0.85..=1.0),
    ];
    let scene = SceneSpec {
        seed,
        objects,
        ground: GroundPlane {
            height: ground_height,
            material: Material {
                albedo: tint,
                roughness: rng.random_range(0.5..=1.0),
                metallic: 0.0,
                specular: 0.5,
            },
        },
    };
    scene.validate()?;
    Ok(scene)
}
