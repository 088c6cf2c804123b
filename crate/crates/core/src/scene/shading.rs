use std::f64::consts::PI;

use ndarray::Array3;

use super::envmap::reinhard;
use super::geometry::{camera_ray, occluded, trace, CameraBasis, Ray, Vec3};
use super::{CameraPose, EnvMap, Material, Resolution, SceneSpec};

const SHADOW_OFFSET: f64 = 1e-4;
// GGX is undefined at alpha = 0; roughness below this is treated as this.
const MIN_ROUGHNESS: f64 = 0.05;

/// Lambert diffuse plus GGX/Smith/Schlick specular (UE4 parameterisation).
///
/// `n`, `v`, `l` are unit vectors; `v` points towards the viewer and `l`
/// towards the light. Returns per-channel reflectance without the cosine.
pub fn brdf(n: &Vec3, v: &Vec3, l: &Vec3, m: &Material) -> [f64; 3] {
    let nl = n.dot(l);
    if nl <= 0.0 {
        return [0.0; 3];
    }
    let diffuse_scale = (1.0 - m.metallic) / PI;
    let mut out = m.albedo.map(|a| a * diffuse_scale);
    let nv = n.dot(v);
    if nv <= 0.0 {
        return out;
    }
    let h = (v + l).normalize();
    let nh = n.dot(&h).max(0.0);
    let vh = v.dot(&h).max(0.0);
    let rough = m.roughness.max(MIN_ROUGHNESS);
    let alpha = rough * rough;
    let a2 = alpha * alpha;
    let denom = nh * nh * (a2 - 1.0) + 1.0;
    let d = a2 / (PI * denom * denom);
    let k = (rough + 1.0) * (rough + 1.0) / 8.0;
    let g1 = |x: f64| x / (x * (1.0 - k) + k);
    let g = g1(nl) * g1(nv);
    let fc = (1.0 - vh).powi(5);
    let common = d * g / (4.0 * nl * nv);
    for (ch, o) in out.iter_mut().enumerate() {
        let f0 = 0.08 * m.specular * (1.0 - m.metallic) + m.albedo[ch] * m.metallic;
        // Reflectance below ~2% is treated as pre-baked occlusion, as in UE4.
        let f = f0 + ((50.0 * f0).min(1.0) - f0) * fc;
        *o += common * f;
    }
    out
}

/// Binary visibility of direction `dir` from a surface point.
pub fn visible(scene: &SceneSpec, point: &Vec3, normal: &Vec3, dir: &Vec3) -> bool {
    let ray = Ray {
        origin: point + normal * SHADOW_OFFSET,
        dir: *dir,
    };
    !occluded(&ray, scene)
}

struct TexelLight {
    dir: Vec3,
    /// Radiance times solid angle.
    power: [f64; 3],
}

fn texel_lights(env: &EnvMap) -> Vec<TexelLight> {
    let mut lights = Vec::new();
    for r in 0..env.height() {
        let dw = env.texel_solid_angle(r);
        for c in 0..env.width() {
            let power = [0, 1, 2].map(|ch| env.hdr[[r, c, ch]] as f64 * dw);
            if power.iter().all(|&p| p == 0.0) {
                continue;
            }
            lights.push(TexelLight {
                dir: env.texel_direction(r, c),
                power,
            });
        }
    }
    lights
}

/// Linear (pre-tonemap) direct illumination from every envmap texel with
/// shadow rays. Missed pixels carry the envmap radiance along the ray.
pub fn render_reference_linear(
    scene: &SceneSpec,
    env: &EnvMap,
    pose: &CameraPose,
    res: Resolution,
) -> Array3<f64> {
    let basis = CameraBasis::new(pose);
    let lights = texel_lights(env);
    let mut out = Array3::<f64>::zeros((res.height, res.width, 3));
    for r in 0..res.height {
        for c in 0..res.width {
            let ray = camera_ray(&basis, res, r, c);
            let rad = match trace(&ray, scene) {
                None => env.lookup(&ray.dir),
                Some(hit) => {
                    let m = if hit.object < scene.objects.len() {
                        &scene.objects[hit.object].material
                    } else {
                        &scene.ground.material
                    };
                    let v = -ray.dir;
                    let mut acc = [0.0; 3];
                    for light in &lights {
                        let cos = hit.normal.dot(&light.dir);
                        if cos <= 0.0 || !visible(scene, &hit.point, &hit.normal, &light.dir) {
                            continue;
                        }
                        let f = brdf(&hit.normal, &v, &light.dir, m);
                        for ch in 0..3 {
                            acc[ch] += light.power[ch] * f[ch] * cos;
                        }
                    }
                    acc
                }
            };
            for ch in 0..3 {
                out[[r, c, ch]] = rad[ch];
            }
        }
    }
    out
}

/// Tonemapped reference image in `[0, 1)`.
pub fn render_reference(
    scene: &SceneSpec,
    env: &EnvMap,
    pose: &CameraPose,
    res: Resolution,
) -> Array3<f32> {
    render_reference_linear(scene, env, pose, res).mapv(|x| reinhard(x) as f32)
}
