use ndarray::{Array2, Array3};

use super::geometry::{camera_ray, trace, CameraBasis, Vec3};
use super::{CameraPose, Resolution, SceneSpec};

/// Screen-space G-buffers for one frame. All channels lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GBufferFrame {
    pub albedo: Array3<f32>,
    /// Camera-space unit normals encoded as `(n + 1) / 2`.
    pub normal: Array3<f32>,
    /// Ray distance divided by the dataset's `depth_max`, clamped.
    pub depth: Array3<f32>,
    /// (roughness, metallic, specular).
    pub material: Array3<f32>,
    pub hit_mask: Array3<f32>,
}

impl GBufferFrame {
    pub fn resolution(&self) -> Resolution {
        let (h, w, _) = self.albedo.dim();
        Resolution::new(h, w)
    }

    pub(crate) fn zeros(res: Resolution) -> Self {
        let (h, w) = (res.height, res.width);
        Self {
            albedo: Array3::zeros((h, w, 3)),
            normal: Array3::zeros((h, w, 3)),
            depth: Array3::zeros((h, w, 1)),
            material: Array3::zeros((h, w, 3)),
            hit_mask: Array3::zeros((h, w, 1)),
        }
    }
}

#[inline]
pub fn encode_normal(n: [f64; 3]) -> [f64; 3] {
    n.map(|c| (c + 1.0) * 0.5)
}

#[inline]
pub fn decode_normal(e: [f64; 3]) -> [f64; 3] {
    e.map(|c| c * 2.0 - 1.0)
}

/// One pixel-centre primary ray per pixel; misses get depth 1, normal (0,0,1)
/// and zero albedo/material.
pub fn rasterize_gbuffers(
    scene: &SceneSpec,
    pose: &CameraPose,
    res: Resolution,
    depth_max: f64,
) -> GBufferFrame {
    rasterize_with_ids(scene, pose, res, depth_max).0
}

/// Same as [`rasterize_gbuffers`] plus a per-pixel object index
/// (`-1` for misses, `objects.len()` for the ground).
pub fn rasterize_with_ids(
    scene: &SceneSpec,
    pose: &CameraPose,
    res: Resolution,
    depth_max: f64,
) -> (GBufferFrame, Array2<i32>) {
    let basis = CameraBasis::new(pose);
    let mut g = GBufferFrame::zeros(res);
    let mut ids = Array2::from_elem((res.height, res.width), -1i32);
    let miss_normal = encode_normal([0.0, 0.0, 1.0]);
    for r in 0..res.height {
        for c in 0..res.width {
            let ray = camera_ray(&basis, res, r, c);
            match trace(&ray, scene) {
                Some(hit) => {
                    let m = if hit.object < scene.objects.len() {
                        scene.objects[hit.object].material
                    } else {
                        scene.ground.material
                    };
                    let nc: Vec3 = basis.to_camera(&hit.normal).normalize();
                    let enc = encode_normal([nc.x, nc.y, nc.z]);
                    for ch in 0..3 {
                        g.albedo[[r, c, ch]] = m.albedo[ch] as f32;
                        g.normal[[r, c, ch]] = enc[ch] as f32;
                    }
                    g.material[[r, c, 0]] = m.roughness as f32;
                    g.material[[r, c, 1]] = m.metallic as f32;
                    g.material[[r, c, 2]] = m.specular as f32;
                    g.depth[[r, c, 0]] = (hit.t / depth_max).clamp(0.0, 1.0) as f32;
                    g.hit_mask[[r, c, 0]] = 1.0;
                    ids[[r, c]] = hit.object as i32;
                }
                None => {
                    for ch in 0..3 {
                        g.normal[[r, c, ch]] = miss_normal[ch] as f32;
                    }
                    g.depth[[r, c, 0]] = 1.0;
                }
            }
        }
    }
    (g, ids)
}
