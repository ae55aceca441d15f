//! Pinhole camera geometry: world/camera transforms, projection to the
//! normalized plane and to pixels, and pixel ray casting.
//!
//! Conventions follow COLMAP: the pose maps world to camera
//! (`p_cam = R * p_world + t`), the camera looks down +z with x right and
//! y down, and pixel coordinates address the continuous image plane so that
//! integer coordinates sit at pixel centers.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;

/// Minimum camera-frame depth accepted by projection.
pub const Z_MIN: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("pixel ({u}, {v}) outside image {width}x{height}")]
    PixelOutOfBounds {
        u: f64,
        v: f64,
        width: u32,
        height: u32,
    },
    #[error("degenerate ray interval [{t_near}, {t_far}]")]
    BadInterval { t_near: f64, t_far: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CameraModel {
    SimplePinhole,
    Pinhole,
}

impl CameraModel {
    /// COLMAP numeric model id.
    pub fn colmap_id(self) -> i32 {
        match self {
            CameraModel::SimplePinhole => 0,
            CameraModel::Pinhole => 1,
        }
    }

    pub fn from_colmap_id(id: i32) -> Option<Self> {
        match id {
            0 => Some(CameraModel::SimplePinhole),
            1 => Some(CameraModel::Pinhole),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CameraModel::SimplePinhole => "SIMPLE_PINHOLE",
            CameraModel::Pinhole => "PINHOLE",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "SIMPLE_PINHOLE" => Some(CameraModel::SimplePinhole),
            "PINHOLE" => Some(CameraModel::Pinhole),
            _ => None,
        }
    }

    /// Number of intrinsic parameters stored on disk.
    pub fn num_params(self) -> usize {
        match self {
            CameraModel::SimplePinhole => 3,
            CameraModel::Pinhole => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub camera_id: u32,
    pub model: CameraModel,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn pinhole(camera_id: u32, width: u32, height: u32, fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self {
            camera_id,
            model: CameraModel::Pinhole,
            width,
            height,
            fx,
            fy,
            cx,
            cy,
        }
    }

    /// Checks the intrinsic invariants, returning a description of the first violation.
    pub fn validate(&self) -> Result<(), String> {
        if self.width == 0 || self.height == 0 {
            return Err(format!("camera {}: zero image size", self.camera_id));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(format!("camera {}: non-positive focal length", self.camera_id));
        }
        if self.model == CameraModel::SimplePinhole && self.fx != self.fy {
            return Err(format!("camera {}: SIMPLE_PINHOLE with fx != fy", self.camera_id));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(format!("camera {}: non-finite principal point", self.camera_id));
        }
        Ok(())
    }

    /// Model parameters in COLMAP order.
    pub fn params(&self) -> Vec<f64> {
        match self.model {
            CameraModel::SimplePinhole => vec![self.fx, self.cx, self.cy],
            CameraModel::Pinhole => vec![self.fx, self.fy, self.cx, self.cy],
        }
    }

    pub fn from_params(
        camera_id: u32,
        model: CameraModel,
        width: u32,
        height: u32,
        params: &[f64],
    ) -> Option<Self> {
        if params.len() != model.num_params() {
            return None;
        }
        let (fx, fy, cx, cy) = match model {
            CameraModel::SimplePinhole => (params[0], params[0], params[1], params[2]),
            CameraModel::Pinhole => (params[0], params[1], params[2], params[3]),
        };
        Some(Self {
            camera_id,
            model,
            width,
            height,
            fx,
            fy,
            cx,
            cy,
        })
    }

    pub fn contains(&self, px: Vec2) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a pose from COLMAP's (qw, qx, qy, qz) and t, normalizing the quaternion.
    pub fn from_wxyz(q: [f64; 4], t: [f64; 3]) -> Self {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        Self {
            rotation: UnitQuaternion::from_quaternion(quat),
            translation: Vec3::new(t[0], t[1], t[2]),
        }
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.inverse() * self.translation)
    }

    /// Pose of a camera at `eye` looking at `target`, with `up` pointing up in the image.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let forward = (target - eye).normalize();
        let right = (-up).cross(&forward).normalize();
        let down = forward.cross(&right);
        let rows = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let rotation = UnitQuaternion::from_matrix(&rows);
        let translation = -(rotation * eye);
        Self {
            rotation,
            translation,
        }
    }
}

pub fn world_to_camera(pose: &Pose, p_world: &Vec3) -> Vec3 {
    pose.rotation * p_world + pose.translation
}

/// Perspective division onto the normalized image plane; `None` when the
/// point is at or behind `Z_MIN`.
pub fn project_normalized(p_cam: &Vec3) -> Option<Vec2> {
    if p_cam.z <= Z_MIN {
        return None;
    }
    Some(Vec2::new(p_cam.x / p_cam.z, p_cam.y / p_cam.z))
}

/// Pixel coordinates of a world point, without the in-image test.
pub fn project_unbounded(cam: &CameraIntrinsics, pose: &Pose, p_world: &Vec3) -> Option<Vec2> {
    let n = project_normalized(&world_to_camera(pose, p_world))?;
    Some(Vec2::new(cam.fx * n.x + cam.cx, cam.fy * n.y + cam.cy))
}

/// Pixel coordinates of a world point; `None` when behind the camera or
/// outside `[0,width) x [0,height)`.
pub fn project_to_pixel(cam: &CameraIntrinsics, pose: &Pose, p_world: &Vec3) -> Option<Vec2> {
    project_unbounded(cam, pose, p_world).filter(|px| cam.contains(*px))
}

/// Rasterizes a continuous coordinate: round to nearest, ties toward +inf.
pub fn pixel_index(coord: f64) -> i64 {
    (coord + 0.5).floor() as i64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, t_near: f64, t_far: f64) -> Result<Self, GeometryError> {
        if !(t_near >= 0.0 && t_near < t_far) {
            return Err(GeometryError::BadInterval { t_near, t_far });
        }
        Ok(Self {
            origin,
            direction: direction.normalize(),
            t_near,
            t_far,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// World-space unit direction through pixel `(u, v)`, no bounds check.
pub fn pixel_direction(cam: &CameraIntrinsics, pose: &Pose, u: f64, v: f64) -> Vec3 {
    let d_cam = Vec3::new((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
    (pose.rotation.inverse() * d_cam).normalize()
}

pub fn pixel_to_ray(
    cam: &CameraIntrinsics,
    pose: &Pose,
    u: f64,
    v: f64,
    t_near: f64,
    t_far: f64,
) -> Result<Ray, GeometryError> {
    if !cam.contains(Vec2::new(u, v)) {
        return Err(GeometryError::PixelOutOfBounds {
            u,
            v,
            width: cam.width,
            height: cam.height,
        });
    }
    Ray::new(pose.center(), pixel_direction(cam, pose, u, v), t_near, t_far)
}
