use nalgebra::{Matrix3, Vector3};

use super::{CameraPose, Resolution, SceneSpec, Shape};

pub type Vec3 = Vector3<f64>;

pub(crate) const RAY_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub dir: Vec3,
}

#[derive(Debug, Clone, Copy)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    pub normal: Vec3,
    /// Index into `SceneSpec::objects`, or `objects.len()` for the ground.
    pub object: usize,
}

pub(crate) fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

/// Orthonormal camera frame. Camera space is right-handed with x right,
/// y up and the camera looking down -z.
#[derive(Debug, Clone, Copy)]
pub struct CameraBasis {
    pub origin: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    pub back: Vec3,
    pub tan_half_fov: f64,
}

impl CameraBasis {
    pub fn new(pose: &CameraPose) -> Self {
        let origin = v3(pose.position);
        let forward = (v3(pose.look_at) - origin).normalize();
        let world_up = if forward.y.abs() > 0.999 {
            Vec3::new(0.0, 0.0, -1.0)
        } else {
            Vec3::new(0.0, 1.0, 0.0)
        };
        let right = forward.cross(&world_up).normalize();
        let up = right.cross(&forward);
        Self {
            origin,
            right,
            up,
            back: -forward,
            tan_half_fov: (pose.fov_deg.to_radians() * 0.5).tan(),
        }
    }

    /// Camera-to-world rotation (columns are the camera axes in world space).
    pub fn rotation(&self) -> Matrix3<f64> {
        Matrix3::from_columns(&[self.right, self.up, self.back])
    }

    pub fn to_camera(&self, world_dir: &Vec3) -> Vec3 {
        Vec3::new(
            world_dir.dot(&self.right),
            world_dir.dot(&self.up),
            world_dir.dot(&self.back),
        )
    }
}

/// Primary ray through the centre of pixel (`row`, `col`).
pub fn camera_ray(basis: &CameraBasis, res: Resolution, row: usize, col: usize) -> Ray {
    let aspect = res.width as f64 / res.height as f64;
    let x = ((col as f64 + 0.5) / res.width as f64 * 2.0 - 1.0) * basis.tan_half_fov * aspect;
    let y = (1.0 - (row as f64 + 0.5) / res.height as f64 * 2.0) * basis.tan_half_fov;
    let dir = (basis.right * x + basis.up * y - basis.back).normalize();
    Ray {
        origin: basis.origin,
        dir,
    }
}

fn hit_sphere(ray: &Ray, center: &Vec3, radius: f64) -> Option<(f64, Vec3)> {
    let oc = ray.origin - center;
    let b = oc.dot(&ray.dir);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let mut t = -b - sq;
    if t <= RAY_EPS {
        t = -b + sq;
        if t <= RAY_EPS {
            return None;
        }
    }
    let p = ray.origin + ray.dir * t;
    Some((t, (p - center) / radius))
}

fn hit_box(ray: &Ray, center: &Vec3, half: f64) -> Option<(f64, Vec3)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut near_axis = 0;
    let mut far_axis = 0;
    for axis in 0..3 {
        let o = ray.origin[axis] - center[axis];
        let d = ray.dir[axis];
        if d.abs() < 1e-15 {
            if o.abs() > half {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let mut t0 = (-half - o) * inv;
        let mut t1 = (half - o) * inv;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_near {
            t_near = t0;
            near_axis = axis;
        }
        if t1 < t_far {
            t_far = t1;
            far_axis = axis;
        }
        if t_near > t_far {
            return None;
        }
    }
    let (t, axis) = if t_near > RAY_EPS {
        (t_near, near_axis)
    } else if t_far > RAY_EPS {
        (t_far, far_axis)
    } else {
        return None;
    };
    let p = ray.origin + ray.dir * t;
    let mut n = Vec3::zeros();
    n[axis] = (p[axis] - center[axis]).signum();
    Some((t, n))
}

fn hit_ground(ray: &Ray, height: f64) -> Option<(f64, Vec3)> {
    if ray.dir.y.abs() < 1e-15 {
        return None;
    }
    let t = (height - ray.origin.y) / ray.dir.y;
    if t <= RAY_EPS {
        return None;
    }
    let n = if ray.origin.y >= height {
        Vec3::new(0.0, 1.0, 0.0)
    } else {
        Vec3::new(0.0, -1.0, 0.0)
    };
    Some((t, n))
}

fn hit_object(ray: &Ray, scene: &SceneSpec, index: usize) -> Option<(f64, Vec3)> {
    if index == scene.objects.len() {
        return hit_ground(ray, scene.ground.height);
    }
    let o = &scene.objects[index];
    let c = v3(o.center);
    match o.shape {
        Shape::Sphere => hit_sphere(ray, &c, o.size),
        Shape::Box => hit_box(ray, &c, o.size),
    }
}

/// Nearest intersection with any object or the ground plane.
pub(crate) fn trace(ray: &Ray, scene: &SceneSpec) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for i in 0..=scene.objects.len() {
        if let Some((t, normal)) = hit_object(ray, scene, i) {
            if best.is_none_or(|b| t < b.t) {
                best = Some(Hit {
                    t,
                    point: ray.origin + ray.dir * t,
                    normal,
                    object: i,
                });
            }
        }
    }
    best
}

/// Whether the ray hits anything at all.
pub(crate) fn occluded(ray: &Ray, scene: &SceneSpec) -> bool {
    (0..=scene.objects.len()).any(|i| hit_object(ray, scene, i).is_some())
}
