use std::f64::consts::{PI, TAU};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::geometry::{CameraBasis, Vec3};
use super::CameraPose;
use crate::{Error, Result};

/// Lat-long HDR environment map.
///
/// Row `i` covers polar angle `θ ∈ [πi/H, π(i+1)/H]` measured from world +y,
/// column `j` covers azimuth `φ ∈ [2πj/W, 2π(j+1)/W]` measured from +x
/// towards +z.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvMap {
    /// `H'×W'×3` radiance, non-negative.
    pub hdr: Array3<f32>,
}

impl EnvMap {
    pub fn new(hdr: Array3<f32>) -> Result<Self> {
        let (h, w, c) = hdr.dim();
        if h < 4 || w < 8 || c != 3 {
            return Err(Error::invalid(format!("envmap shape {h}x{w}x{c}")));
        }
        if hdr.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("envmap values must be finite and non-negative"));
        }
        Ok(Self { hdr })
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(Array3::from_elem((height, width, 3), value))
    }

    pub fn height(&self) -> usize {
        self.hdr.dim().0
    }

    pub fn width(&self) -> usize {
        self.hdr.dim().1
    }

    /// Unit direction through the centre of texel (`row`, `col`).
    pub fn texel_direction(&self, row: usize, col: usize) -> Vec3 {
        latlong_direction(self.height(), self.width(), row, col)
    }

    /// Exact solid angle of the texel band on the unit sphere.
    pub fn texel_solid_angle(&self, row: usize) -> f64 {
        let h = self.height() as f64;
        let t0 = PI * row as f64 / h;
        let t1 = PI * (row + 1) as f64 / h;
        (TAU / self.width() as f64) * (t0.cos() - t1.cos())
    }

    /// Bilinear radiance lookup; wraps in azimuth, clamps in polar angle.
    pub fn lookup(&self, dir: &Vec3) -> [f64; 3] {
        let (h, w) = (self.height(), self.width());
        let theta = dir.y.clamp(-1.0, 1.0).acos();
        let mut phi = dir.z.atan2(dir.x);
        if phi < 0.0 {
            phi += TAU;
        }
        let v = (theta / PI * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let u = phi / TAU * w as f64 - 0.5;
        let r0 = v.floor() as usize;
        let r1 = (r0 + 1).min(h - 1);
        let fv = v - r0 as f64;
        let u0 = u.floor();
        let fu = u - u0;
        let c0 = (u0 as i64).rem_euclid(w as i64) as usize;
        let c1 = (c0 + 1) % w;
        let mut out = [0.0; 3];
        for (ch, o) in out.iter_mut().enumerate() {
            let a = self.hdr[[r0, c0, ch]] as f64 * (1.0 - fu) + self.hdr[[r0, c1, ch]] as f64 * fu;
            let b = self.hdr[[r1, c0, ch]] as f64 * (1.0 - fu) + self.hdr[[r1, c1, ch]] as f64 * fu;
            *o = a * (1.0 - fv) + b * fv;
        }
        out
    }
}

pub(crate) fn latlong_direction(h: usize, w: usize, row: usize, col: usize) -> Vec3 {
    let theta = PI * (row as f64 + 0.5) / h as f64;
    let phi = TAU * (col as f64 + 0.5) / w as f64;
    Vec3::new(theta.sin() * phi.cos(), theta.cos(), theta.sin() * phi.sin())
}

/// Reinhard tonemapping `x / (1 + x)`.
#[inline]
pub fn reinhard(x: f64) -> f64 {
    x / (1.0 + x)
}

/// Procedural HDR sky: a constant ambient term plus 1–4 Gaussian lobes.
///
/// Lobe centres sit on texel centres in the upper hemisphere so the peak
/// radiance is always present in the sampled map.
pub fn gen_envmap(seed: u64, height: usize, width: usize) -> Result<EnvMap> {
    if height < 4 || width < 8 {
        return Err(Error::invalid(format!("envmap resolution {height}x{width} too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ambient: f64 = rng.random_range(0.05..=0.3);
    let n_lobes: usize = rng.random_range(1..=4);
    struct Lobe {
        dir: Vec3,
        width: f64,
        color: [f64; 3],
    }
    let upper_rows = (height / 2).max(1);
    let lobes: Vec<Lobe> = (0..n_lobes)
        .map(|_| {
            let row = rng.random_range(0..upper_rows);
            let col = rng.random_range(0..width);
            let peak: f64 = rng.random_range(1.0..=20.0);
            let tint = [
                rng.random_range(0.7..=1.0),
                rng.random_range(0.7..=1.0),
                rng.random_range(0.7..=1.0),
            ];
            let maxt = tint.iter().cloned().fold(0.0, f64::max);
            Lobe {
                dir: latlong_direction(height, width, row, col),
                width: rng.random_range(0.15..=0.45),
                color: tint.map(|t| peak * t / maxt),
            }
        })
        .collect();
    let mut hdr = Array3::<f32>::zeros((height, width, 3));
    for r in 0..height {
        for c in 0..width {
            let d = latlong_direction(height, width, r, c);
            for ch in 0..3 {
                let mut v = ambient;
                for l in &lobes {
                    let ang = d.dot(&l.dir).clamp(-1.0, 1.0).acos();
                    v += l.color[ch] * (-(ang * ang) / (2.0 * l.width * l.width)).exp();
                }
                hdr[[r, c, ch]] = v as f32;
            }
        }
    }
    EnvMap::new(hdr)
}

/// Envmap resampled into the camera frame and Reinhard tonemapped.
///
/// Output texel (i, j) holds the radiance arriving along the camera-space
/// lat-long direction of (i, j), where camera space uses y as the pole.
pub fn tonemap_rotate(env: &EnvMap, pose: &CameraPose) -> Array3<f32> {
    let (h, w) = (env.height(), env.width());
    let rot = CameraBasis::new(pose).rotation();
    let mut out = Array3::<f32>::zeros((h, w, 3));
    for r in 0..h {
        for c in 0..w {
            let world = rot * latlong_direction(h, w, r, c);
            let rad = env.lookup(&world);
            for ch in 0..3 {
                out[[r, c, ch]] = reinhard(rad[ch]) as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn axis_pose() -> CameraPose {
        // Basis equals the world axes: right=+x, up=+y, back=+z.
        CameraPose {
            position: [0.0, 0.0, 4.0],
            look_at: [0.0, 0.0, 0.0],
            fov_deg: 40.0,
            frame_index: 0,
        }
    }

    #[test]
    fn hdr_lobes_present() {
        let env = gen_envmap(0, 16, 32).unwrap();
        let max = env.hdr.iter().cloned().fold(0.0f32, f32::max);
        assert!(max > 1.0, "max {max}");
        assert!(env.hdr.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn envmap_is_deterministic() {
        assert_eq!(gen_envmap(3, 16, 32).unwrap(), gen_envmap(3, 16, 32).unwrap());
        assert_ne!(gen_envmap(3, 16, 32).unwrap(), gen_envmap(4, 16, 32).unwrap());
    }

    #[test]
    fn envmap_rejects_small_resolution() {
        assert!(gen_envmap(0, 3, 32).is_err());
        assert!(gen_envmap(0, 16, 7).is_err());
    }

    #[test]
    fn reinhard_values() {
        for (x, y) in [(0.0, 0.0), (1.0, 0.5), (3.0, 0.75)] {
            let env = EnvMap::constant(8, 16, x as f32).unwrap();
            let ldr = tonemap_rotate(&env, &axis_pose());
            assert!(ldr.iter().all(|&v| (v as f64 - y).abs() < 1e-6), "{x}");
        }
    }

    #[test]
    fn solid_angles_cover_sphere() {
        let env = EnvMap::constant(16, 32, 1.0).unwrap();
        let total: f64 = (0..16).map(|r| env.texel_solid_angle(r) * 32.0).sum();
        assert!((total - 4.0 * PI).abs() < 1e-12);
    }

    #[test]
    fn identity_rotation_resamples_texel_centres() {
        let env = gen_envmap(11, 8, 16).unwrap();
        let ldr = tonemap_rotate(&env, &axis_pose());
        for r in 0..8 {
            for c in 0..16 {
                for ch in 0..3 {
                    let expect = reinhard(env.hdr[[r, c, ch]] as f64);
                    assert!((ldr[[r, c, ch]] as f64 - expect).abs() < 1e-5);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn reinhard_monotone_and_bounded(x in 0.0f64..1e6, d in 1e-6f64..10.0) {
            let a = reinhard(x);
            let b = reinhard(x + d);
            prop_assert!(a < b);
            prop_assert!((0.0..1.0).contains(&a));
        }
    }
}
