//! Pinhole cameras, rays and the scene bounding box.
//!
//! Conventions used throughout the crate:
//!
//! * The camera frame is x right, y down, z forward (optical axis = +z).
//! * `Camera::rotation` maps camera-frame vectors to world frame and
//!   `Camera::translation` is the camera origin in world units.
//! * Continuous pixel coordinates put the center of pixel `(i, j)` at
//!   `(i + 0.5, j + 0.5)`, with `i` the column and `j` the row.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Continuous pixel coordinate of the center of pixel `(col, row)`.
pub fn pixel_center(col: usize, row: usize) -> [f64; 2] {
    [col as f64 + 0.5, row as f64 + 0.5]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Camera {
    /// Builds a camera and checks its invariants.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        rotation: Mat3,
        translation: Vec3,
    ) -> Result<Self> {
        let cam = Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::input("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::input("image size must be nonzero"));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(Error::input("principal point x outside image"));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::input("principal point y outside image"));
        }
        let ortho = self.rotation.transpose() * self.rotation - Mat3::identity();
        if ortho.amax() > 1e-9 {
            return Err(Error::input("rotation is not orthonormal"));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::input("camera origin is not finite"));
        }
        Ok(())
    }

    /// A camera at `eye` looking at `target`; `up` is the approximate world
    /// up direction. The focal length is derived from the horizontal field
    /// of view (radians) and the principal point sits at the image center.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fov_x: f64, width: u32, height: u32) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::input("eye and target coincide"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::input("up vector parallel to view direction"))?;
        // y points down in the camera frame.
        let down = forward.cross(&right);
        let rotation = Mat3::from_columns(&[right, down, forward]);
        let f = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Camera::new(
            f,
            f,
            0.5 * width as f64,
            0.5 * height as f64,
            width,
            height,
            rotation,
            eye,
        )
    }

    pub fn optical_axis(&self) -> Vec3 {
        self.rotation.column(2).into_owned()
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// World-frame unit direction through a continuous pixel coordinate.
    pub fn direction(&self, px: [f64; 2]) -> Vec3 {
        let d = Vec3::new((px[0] - self.cx) / self.fx, (px[1] - self.cy) / self.fy, 1.0);
        (self.rotation * d).normalize()
    }

    pub fn world_to_camera(&self, point: &Vec3) -> Vec3 {
        self.rotation.transpose() * (point - self.translation)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneBounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl Default for SceneBounds {
    fn default() -> Self {
        SceneBounds {
            min: Vec3::repeat(-1.0),
            max: Vec3::repeat(1.0),
        }
    }
}

impl SceneBounds {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if (0..3).all(|k| min[k] < max[k]) {
            Ok(SceneBounds { min, max })
        } else {
            Err(Error::input("scene bounds must satisfy min < max"))
        }
    }

    pub fn contains(&self, p: &Vec3, tol: f64) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] - tol && p[k] <= self.max[k] + tol)
    }
}

/// Slab-method intersection. Returns `(t0, t1)` with `0 <= t0 < t1`, or
/// `None` when the ray misses, only grazes a face or edge, or the box lies
/// behind the origin.
pub fn ray_aabb_intersect(ray: &Ray, bounds: &SceneBounds) -> Option<(f64, f64)> {
    let mut t0 = 0.0_f64;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        let o = ray.origin[k];
        let d = ray.direction[k];
        if d == 0.0 {
            // Parallel to the slab: inside strictly or not at all.
            if o <= bounds.min[k] || o >= bounds.max[k] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let (a, b) = {
            let a = (bounds.min[k] - o) * inv;
            let b = (bounds.max[k] - o) * inv;
            if a <= b {
                (a, b)
            } else {
                (b, a)
            }
        };
        t0 = t0.max(a);
        t1 = t1.min(b);
    }
    (t0 < t1).then_some((t0, t1))
}

/// Back-projects a continuous pixel coordinate and clips the ray to `bounds`.
/// `Ok(None)` signals a ray that misses the bounds.
pub fn ray_for_pixel(camera: &Camera, px: [f64; 2], bounds: &SceneBounds) -> Result<Option<Ray>> {
    let (w, h) = (camera.width as f64, camera.height as f64);
    if !(px[0] >= 0.0 && px[0] <= w && px[1] >= 0.0 && px[1] <= h) {
        return Err(Error::input(format!(
            "pixel ({}, {}) outside {}x{} image",
            px[0], px[1], camera.width, camera.height
        )));
    }
    let mut ray = Ray {
        origin: camera.translation,
        direction: camera.direction(px),
        t_near: 0.0,
        t_far: 0.0,
    };
    Ok(ray_aabb_intersect(&ray, bounds).map(|(t0, t1)| {
        ray.t_near = t0;
        ray.t_far = t1;
        ray
    }))
}

/// Pinhole projection to continuous pixel coordinates plus camera-frame depth.
pub fn project(camera: &Camera, point: &Vec3) -> Result<([f64; 2], f64)> {
    let pc = camera.world_to_camera(point);
    if pc.z <= 0.0 {
        return Err(Error::BehindCamera { depth: pc.z });
    }
    let u = camera.fx * pc.x / pc.z + camera.cx;
    let v = camera.fy * pc.y / pc.z + camera.cy;
    Ok(([u, v], pc.z))
}

/// `x ↦ rotation · x + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Applies the transform to a camera pose, i.e. moves the camera along
    /// with the scene.
    pub fn apply_to_camera(&self, camera: &Camera) -> Camera {
        Camera {
            rotation: self.rotation * camera.rotation,
            translation: self.apply(&camera.translation),
            ..*camera
        }
    }
}

/// Rotation about a unit axis by `angle` radians.
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle).into_inner()
}

/// Angle of the rotation `a^T b`, i.e. the geodesic distance between two
/// rotations.
pub fn rotation_angle_between(a: &Mat3, b: &Mat3) -> f64 {
    let r = a.transpose() * b;
    ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
}
