use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub type Vec3 = [f64; 3];

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

/// Image extent in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub height: usize,
    pub width: usize,
}

impl Resolution {
    pub fn square(n: usize) -> Self {
        Self { height: n, width: n }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Orbit camera looking at `look_at` from a point on a sphere of `radius`.
///
/// Yaw rotates about the vertical axis (yaw 0 looks down −z from +z), pitch
/// lifts the camera above the horizontal plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraPose {
    pub yaw: f64,
    pub pitch: f64,
    #[serde(default = "CameraPose::default_radius")]
    pub radius: f64,
    #[serde(default)]
    pub look_at: Vec3,
    #[serde(default = "CameraPose::default_fov")]
    pub fov: f64,
}

impl Default for CameraPose {
    fn default() -> Self {
        Self::new(0.0, 0.0)
    }
}

/// Camera frame: position, forward, right and up unit vectors.
#[derive(Clone, Copy, Debug)]
pub struct CameraFrame {
    pub position: Vec3,
    pub forward: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    pub tan_half_fov: f64,
}

impl CameraPose {
    pub const DEFAULT_RADIUS: f64 = 2.0;
    pub const DEFAULT_FOV: f64 = 0.4;

    fn default_radius() -> f64 {
        Self::DEFAULT_RADIUS
    }

    fn default_fov() -> f64 {
        Self::DEFAULT_FOV
    }

    /// Pose at the default radius and field of view, aimed at the origin.
    pub fn new(yaw: f64, pitch: f64) -> Self {
        Self {
            yaw,
            pitch,
            radius: Self::DEFAULT_RADIUS,
            look_at: [0.0; 3],
            fov: Self::DEFAULT_FOV,
        }
    }

    pub fn position(&self) -> Vec3 {
        let (sy, cy) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        add(self.look_at, scale([sy * cp, sp, cy * cp], self.radius))
    }

    pub fn frame(&self) -> CameraFrame {
        let position = self.position();
        let forward = normalize(sub(self.look_at, position));
        let right = normalize(cross(forward, [0.0, 1.0, 0.0]));
        let up = cross(right, forward);
        CameraFrame {
            position,
            forward,
            right,
            up,
            tan_half_fov: (0.5 * self.fov).tan(),
        }
    }
}

/// One ray per pixel, row-major from the top-left pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct RayBatch {
    pub origins: Array2<f64>,
    pub directions: Array2<f64>,
    pub resolution: Resolution,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.origins.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pinhole ray generation through pixel centers.
pub fn gen_rays(pose: &CameraPose, res: Resolution) -> RayBatch {
    assert!(res.height >= 2 && res.width >= 2, "resolution must be at least 2x2");
    let fr = pose.frame();
    let aspect = res.width as f64 / res.height as f64;
    let n = res.pixels();
    let mut origins = Array2::zeros((n, 3));
    let mut directions = Array2::zeros((n, 3));
    for i in 0..res.height {
        let v = (1.0 - 2.0 * (i as f64 + 0.5) / res.height as f64) * fr.tan_half_fov;
        for j in 0..res.width {
            let u = (2.0 * (j as f64 + 0.5) / res.width as f64 - 1.0) * fr.tan_half_fov * aspect;
            let d = normalize(add(fr.forward, add(scale(fr.right, u), scale(fr.up, v))));
            let k = i * res.width + j;
            for c in 0..3 {
                origins[[k, c]] = fr.position[c];
                directions[[k, c]] = d[c];
            }
        }
    }
    RayBatch {
        origins,
        directions,
        resolution: res,
    }
}

/// Projects a world point into continuous pixel coordinates `(row, col)` and
/// camera depth. `None` when the point is not in front of the camera.
pub fn project(pose: &CameraPose, res: Resolution, x: Vec3) -> Option<(f64, f64, f64)> {
    let fr = pose.frame();
    let v = sub(x, fr.position);
    let z = dot(v, fr.forward);
    if z <= 0.0 {
        return None;
    }
    let aspect = res.width as f64 / res.height as f64;
    let u = dot(v, fr.right) / (z * fr.tan_half_fov * aspect);
    let w = dot(v, fr.up) / (z * fr.tan_half_fov);
    let col = (u + 1.0) * 0.5 * res.width as f64;
    let row = (1.0 - w) * 0.5 * res.height as f64;
    Some((row, col, z))
}
