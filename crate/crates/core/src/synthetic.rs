//! Analytic test scenes: a textured box room with one removable object,
//! seen from a ring of cameras. Everything here is exact (closed-form
//! ray/primitive intersection), so it serves as ground truth for masks,
//! sparse reconstructions, inpainting priors and renders.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colmap::{
    write_binary_model, write_text_model, ColmapError, Keypoint, Point3D, PosedImage, SparseModel, TrackElement,
};
use crate::geometry::{pixel_direction, project_to_pixel, CameraIntrinsics, Pose, Vec2, Vec3};
use crate::mask::Mask;
use crate::propagation::{MaskPredictor, PredictorError, ViewInput};
use crate::raster::{ColorImage, DepthMap};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("view {0} out of range")]
    ViewOutOfRange(usize),
    #[error(transparent)]
    Colmap(#[from] ColmapError),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureKind {
    Gradient,
    Checker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    pub kind: TextureKind,
    pub seed: u64,
    /// Pattern period (gradient) or cell size (checker), world units.
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Sphere,
    Box,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub center: [f64; 3],
    /// Sphere radius or box half-extent.
    pub size: f64,
    pub albedo: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRing {
    pub count: usize,
    pub radius: f64,
    pub height: f64,
    pub look_at: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub room: RoomSpec,
    pub texture: TextureSpec,
    pub object: ObjectSpec,
    pub cameras: CameraRing,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub keypoints_per_surface: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            room: RoomSpec {
                min: [-2.0, -1.0, -2.0],
                max: [2.0, 1.5, 2.0],
            },
            texture: TextureSpec {
                kind: TextureKind::Gradient,
                seed: 7,
                scale: 3.0,
            },
            object: ObjectSpec {
                shape: Shape::Sphere,
                center: [0.0, -0.3, 0.0],
                size: 0.45,
                albedo: [0.85, 0.25, 0.2],
            },
            cameras: CameraRing {
                count: 8,
                radius: 1.6,
                height: 0.2,
                look_at: [0.0, -0.3, 0.0],
            },
            width: 64,
            height: 64,
            focal: 56.0,
            keypoints_per_surface: 400,
        }
    }
}

/// Surface reached by a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Surface {
    /// Room face: axis * 2 + (1 if the max side).
    Wall(usize),
    Object,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub surface: Surface,
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        let (lo, hi) = (v3(self.room.min), v3(self.room.max));
        if (0..3).any(|a| lo[a] >= hi[a]) {
            return Err(SceneError::Invalid("room min must be below max".into()));
        }
        if self.cameras.count == 0 {
            return Err(SceneError::Invalid("need at least one camera".into()));
        }
        if self.width == 0 || self.height == 0 || !(self.focal > 0.0) {
            return Err(SceneError::Invalid("bad image size or focal length".into()));
        }
        if self.object.size <= 0.0 {
            return Err(SceneError::Invalid("object size must be positive".into()));
        }
        let c = v3(self.object.center);
        let r = self.object.size;
        if (0..3).any(|a| c[a] - r <= lo[a] || c[a] + r >= hi[a]) {
            return Err(SceneError::Invalid("object must lie strictly inside the room".into()));
        }
        for i in 0..self.cameras.count {
            let eye = self.pose(i).center();
            if !self.inside_room(&eye) {
                return Err(SceneError::Invalid(format!("camera {i} is outside the room")));
            }
            if self.object_contains(&eye) {
                return Err(SceneError::Invalid(format!("camera {i} is inside the object")));
            }
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::pinhole(
            1,
            self.width,
            self.height,
            self.focal,
            self.focal,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
    }

    /// Camera on the ring at `angle` radians.
    pub fn pose_at_angle(&self, angle: f64) -> Pose {
        let target = v3(self.cameras.look_at);
        let eye = Vec3::new(
            target.x + self.cameras.radius * angle.cos(),
            self.cameras.height,
            target.z + self.cameras.radius * angle.sin(),
        );
        Pose::look_at(eye, target, Vec3::y())
    }

    pub fn pose(&self, view: usize) -> Pose {
        self.pose_at_angle(2.0 * PI * view as f64 / self.cameras.count as f64)
    }

    /// A camera halfway between ring cameras `k` and `k + 1`, never used for training.
    pub fn holdout_pose(&self, k: usize) -> Pose {
        self.pose_at_angle(2.0 * PI * (k as f64 + 0.5) / self.cameras.count as f64)
    }

    pub fn view_name(view: usize) -> String {
        format!("view_{view:03}.png")
    }

    fn inside_room(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] > self.room.min[a] && p[a] < self.room.max[a])
    }

    fn object_contains(&self, p: &Vec3) -> bool {
        let c = v3(self.object.center);
        match self.object.shape {
            Shape::Sphere => (p - c).norm() <= self.object.size,
            Shape::Box => (p - c).amax() <= self.object.size,
        }
    }

    /// Whether `p` lies on the object surface (within `tol`).
    pub fn on_object(&self, p: &Vec3, tol: f64) -> bool {
        let c = v3(self.object.center);
        match self.object.shape {
            Shape::Sphere => ((p - c).norm() - self.object.size).abs() <= tol,
            Shape::Box => ((p - c).amax() - self.object.size).abs() <= tol,
        }
    }

    /// Exit point of a ray starting inside the room.
    fn room_exit(&self, o: &Vec3, d: &Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for a in 0..3 {
            let (bound, side) = if d[a] > 0.0 {
                (self.room.max[a], 1)
            } else if d[a] < 0.0 {
                (self.room.min[a], 0)
            } else {
                continue;
            };
            let t = (bound - o[a]) / d[a];
            if t > 0.0 && best.is_none_or(|b| t < b.t) {
                best = Some(Hit {
                    t,
                    surface: Surface::Wall(2 * a + side),
                });
            }
        }
        best
    }

    fn object_hit(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        let c = v3(self.object.center);
        let r = self.object.size;
        match self.object.shape {
            Shape::Sphere => {
                let oc = o - c;
                let b = oc.dot(d);
                let disc = b * b - (oc.norm_squared() - r * r);
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                [-b - s, -b + s].into_iter().find(|t| *t > 1e-9)
            }
            Shape::Box => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    let (lo, hi) = (c[a] - r, c[a] + r);
                    if d[a] == 0.0 {
                        if o[a] < lo || o[a] > hi {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = ((lo - o[a]) / d[a], (hi - o[a]) / d[a]);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    t0 = t0.max(ta);
                    t1 = t1.min(tb);
                }
                if t0 > t1 {
                    None
                } else {
                    [t0, t1].into_iter().find(|t| *t > 1e-9)
                }
            }
        }
    }

    /// Nearest hit along a unit-direction ray from inside the room.
    pub fn trace(&self, o: &Vec3, d: &Vec3, with_object: bool) -> Option<Hit> {
        let wall = self.room_exit(o, d);
        let obj = if with_object { self.object_hit(o, d) } else { None };
        match (wall, obj) {
            (Some(w), Some(t)) if t < w.t => Some(Hit {
                t,
                surface: Surface::Object,
            }),
            (None, Some(t)) => Some(Hit {
                t,
                surface: Surface::Object,
            }),
            (w, _) => w,
        }
    }

    /// Wall color at a point on face `face`.
    pub fn wall_color(&self, face: usize, p: &Vec3) -> [f64; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(self.texture.seed.wrapping_mul(31).wrapping_add(face as u64));
        let base: [f64; 3] = [rng.gen_range(0.3..0.9), rng.gen_range(0.3..0.9), rng.gen_range(0.3..0.9)];
        let axis = face / 2;
        let (u, v) = ((p[(axis + 1) % 3]), (p[(axis + 2) % 3]));
        let scale = self.texture.scale;
        let shade = match self.texture.kind {
            TextureKind::Gradient => {
                let phase: f64 = rng.gen_range(0.0..2.0 * PI);
                let dir: f64 = rng.gen_range(0.0..PI);
                let s = (u * dir.cos() + v * dir.sin()) * 2.0 * PI / scale + phase;
                0.7 + 0.3 * s.sin()
            }
            TextureKind::Checker => {
                let parity = ((u / scale).floor() + (v / scale).floor()).rem_euclid(2.0);
                if parity < 0.5 {
                    1.0
                } else {
                    0.55
                }
            }
        };
        base.map(|b| (b * shade).clamp(0.0, 1.0))
    }

    pub fn surface_color(&self, hit: &Hit, p: &Vec3) -> [f64; 3] {
        match hit.surface {
            Surface::Wall(face) => self.wall_color(face, p),
            Surface::Object => self.object.albedo,
        }
    }

    /// Exact color and hit distance for every pixel center.
    pub fn render_pose(&self, pose: &Pose, with_object: bool) -> (ColorImage, DepthMap) {
        let cam = self.intrinsics();
        let mut color = ColorImage::new(self.width, self.height);
        let mut depth = DepthMap::new(self.width, self.height);
        let o = pose.center();
        for y in 0..self.height {
            for x in 0..self.width {
                let d = pixel_direction(&cam, pose, x as f64, y as f64);
                if let Some(hit) = self.trace(&o, &d, with_object) {
                    let p = o + d * hit.t;
                    color.set(x, y, self.surface_color(&hit, &p).map(|c| c as f32));
                    depth.set(x, y, hit.t as f32);
                }
            }
        }
        (color, depth)
    }

    pub fn render_analytic(&self, view: usize, with_object: bool) -> Result<(ColorImage, DepthMap), SceneError> {
        if view >= self.cameras.count {
            return Err(SceneError::ViewOutOfRange(view));
        }
        Ok(self.render_pose(&self.pose(view), with_object))
    }

    pub fn mask_for_pose(&self, pose: &Pose) -> Mask {
        let cam = self.intrinsics();
        let o = pose.center();
        Mask::from_fn(self.width, self.height, |x, y| {
            let d = pixel_direction(&cam, pose, x as f64, y as f64);
            matches!(self.trace(&o, &d, true), Some(Hit { surface: Surface::Object, .. }))
        })
    }

    /// Pixels whose first hit is the object.
    pub fn ground_truth_mask(&self, view: usize) -> Result<Mask, SceneError> {
        if view >= self.cameras.count {
            return Err(SceneError::ViewOutOfRange(view));
        }
        Ok(self.mask_for_pose(&self.pose(view)))
    }

    fn sample_room_surface(&self, rng: &mut ChaCha8Rng) -> Vec3 {
        let (lo, hi) = (v3(self.room.min), v3(self.room.max));
        let ext = hi - lo;
        let areas = [ext.y * ext.z, ext.y * ext.z, ext.x * ext.z, ext.x * ext.z, ext.x * ext.y, ext.x * ext.y];
        let total: f64 = areas.iter().sum();
        let mut pick = rng.gen_range(0.0..total);
        let mut face = 5;
        for (i, a) in areas.iter().enumerate() {
            if pick < *a {
                face = i;
                break;
            }
            pick -= a;
        }
        let axis = face / 2;
        let mut p = Vec3::from_fn(|a, _| rng.gen_range(lo[a]..hi[a]));
        p[axis] = if face % 2 == 1 { hi[axis] } else { lo[axis] };
        p
    }

    fn sample_object_surface(&self, rng: &mut ChaCha8Rng) -> Vec3 {
        let c = v3(self.object.center);
        let r = self.object.size;
        match self.object.shape {
            Shape::Sphere => {
                let z: f64 = rng.gen_range(-1.0..1.0);
                let phi: f64 = rng.gen_range(0.0..2.0 * PI);
                let s = (1.0 - z * z).sqrt();
                c + Vec3::new(s * phi.cos(), s * phi.sin(), z) * r
            }
            Shape::Box => {
                let face = rng.gen_range(0..6);
                let axis = face / 2;
                let mut p = Vec3::from_fn(|_, _| rng.gen_range(-r..r));
                p[axis] = if face % 2 == 1 { r } else { -r };
                c + p
            }
        }
    }

    /// Whether the straight segment from `eye` to surface point `p` is unobstructed.
    pub fn visible_from(&self, eye: &Vec3, p: &Vec3) -> bool {
        let dist = (p - eye).norm();
        let d = (p - eye) / dist;
        match self.trace(eye, &d, true) {
            Some(hit) => hit.t >= dist * (1.0 - 1e-9) - 1e-9,
            None => false,
        }
    }

    /// Sparse reconstruction of the scene with the object present:
    /// `keypoints_per_surface` points on the room and on the object, each
    /// registered as a keypoint in every view that sees it unoccluded.
    pub fn emit_sparse_model(&self, seed: u64) -> Result<SparseModel, SceneError> {
        self.validate()?;
        let cam = self.intrinsics();
        let poses: Vec<Pose> = (0..self.cameras.count).map(|i| self.pose(i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.keypoints_per_surface;
        let mut samples: Vec<(Vec3, [f64; 3])> = Vec::with_capacity(2 * k);
        for _ in 0..k {
            let p = self.sample_room_surface(&mut rng);
            let face = (0..6)
                .find(|f| {
                    let a = f / 2;
                    let b = if f % 2 == 1 { self.room.max[a] } else { self.room.min[a] };
                    p[a] == b
                })
                .unwrap_or(0);
            samples.push((p, self.wall_color(face, &p)));
        }
        for _ in 0..k {
            samples.push((self.sample_object_surface(&mut rng), self.object.albedo));
        }

        let mut keypoints: Vec<Vec<Keypoint>> = vec![Vec::new(); poses.len()];
        let mut points = Vec::new();
        for (p, rgb) in samples {
            let id = points.len() as u64 + 1;
            let mut track = Vec::new();
            for (v, pose) in poses.iter().enumerate() {
                let Some(px) = project_to_pixel(&cam, pose, &p) else {
                    continue;
                };
                if !self.visible_from(&pose.center(), &p) {
                    continue;
                }
                track.push(TrackElement {
                    image_id: v as u32 + 1,
                    keypoint_index: keypoints[v].len() as u32,
                });
                keypoints[v].push(Keypoint {
                    x: px.x,
                    y: px.y,
                    point3d_id: Some(id),
                });
            }
            if track.is_empty() {
                continue;
            }
            points.push(Point3D {
                point3d_id: id,
                position: p,
                color: rgb.map(|c| (c * 255.0).round() as u8),
                reproj_error: 0.0,
                track,
            });
        }
        let images = poses.iter().enumerate().map(|(v, pose)| PosedImage {
            image_id: v as u32 + 1,
            name: Self::view_name(v),
            camera_id: 1,
            pose: *pose,
            keypoints: std::mem::take(&mut keypoints[v]),
        });
        let images: Vec<PosedImage> = images.collect();
        Ok(SparseModel::new([cam], images, points)?)
    }

    /// Ring index of a view name produced by [`SceneSpec::view_name`].
    pub fn view_index(name: &str) -> Option<usize> {
        name.strip_prefix("view_")?.strip_suffix(".png")?.parse().ok()
    }

    pub fn load(path: &Path) -> Result<Self, SceneError> {
        let text = std::fs::read_to_string(path).map_err(|e| SceneError::Io(format!("{}: {e}", path.display())))?;
        let spec: SceneSpec =
            serde_json::from_str(&text).map_err(|e| SceneError::Io(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Mask predictor backed by scene geometry: returns the true object mask
/// when any prompt point lands on it, else an empty mask.
#[derive(Debug, Clone)]
pub struct OracleMaskPredictor {
    spec: SceneSpec,
}

pub fn oracle_mask_predictor(spec: &SceneSpec) -> OracleMaskPredictor {
    OracleMaskPredictor { spec: spec.clone() }
}

impl MaskPredictor for OracleMaskPredictor {
    fn predict(&self, view: &ViewInput, points: &[Vec2]) -> Result<Mask, PredictorError> {
        let idx = SceneSpec::view_index(&view.name)
            .filter(|i| *i < self.spec.cameras.count)
            .ok_or_else(|| PredictorError::External(format!("oracle has no view named {}", view.name)))?;
        let truth = self.spec.mask_for_pose(&self.spec.pose(idx));
        if points.iter().any(|p| truth.contains_point(*p)) {
            Ok(truth)
        } else {
            Ok(Mask::new(self.spec.width, self.spec.height))
        }
    }
}

/// Box detector backed by scene geometry: the bounding box of the true mask.
#[derive(Debug, Clone)]
pub struct OracleDetector {
    spec: SceneSpec,
}

impl OracleDetector {
    pub fn new(spec: &SceneSpec) -> Self {
        Self { spec: spec.clone() }
    }
}

impl crate::propagation::BoxDetector for OracleDetector {
    fn detect(
        &self,
        view: &ViewInput,
        _text: &str,
    ) -> Result<Option<crate::propagation::Detection>, PredictorError> {
        let idx = SceneSpec::view_index(&view.name)
            .filter(|i| *i < self.spec.cameras.count)
            .ok_or_else(|| PredictorError::External(format!("oracle has no view named {}", view.name)))?;
        let truth = self.spec.mask_for_pose(&self.spec.pose(idx));
        let mut bbox: Option<[u32; 4]> = None;
        for (x, y) in truth.foreground() {
            bbox = Some(match bbox {
                None => [x, y, x, y],
                Some([x0, y0, x1, y1]) => [x0.min(x), y0.min(y), x1.max(x), y1.max(y)],
            });
        }
        Ok(bbox.map(|bbox| crate::propagation::Detection { bbox, mask: None }))
    }
}

/// Writes a complete oracle dataset:
///
/// ```text
/// scene.json
/// images/<name>           color with the object
/// masks/<name>.mask.png   true object masks
/// depth/<name>.depth.pfm  depth with the object
/// priors/<name>.inpaint.png, priors/<name>.depth.pfm   object-free color/depth
/// sparse/                 COLMAP model (text and binary)
/// heldout/                object-free views between ring cameras, with sparse/
/// ```
pub fn write_dataset(spec: &SceneSpec, seed: u64, out: &Path) -> Result<SparseModel, SceneError> {
    spec.validate()?;
    let io = |e: std::io::Error| SceneError::Io(format!("{}: {e}", out.display()));
    for sub in ["images", "masks", "depth", "priors", "sparse", "heldout/images", "heldout/sparse", "heldout/background"] {
        std::fs::create_dir_all(out.join(sub)).map_err(io)?;
    }
    let spec_json = serde_json::to_string_pretty(spec).map_err(|e| SceneError::Io(e.to_string()))?;
    std::fs::write(out.join("scene.json"), spec_json + "\n").map_err(io)?;
    let raster = |e: crate::raster::RasterError| SceneError::Io(e.to_string());

    let model = spec.emit_sparse_model(seed)?;
    write_text_model(&model, &out.join("sparse"))?;
    write_binary_model(&model, &out.join("sparse"))?;

    for v in 0..spec.cameras.count {
        let name = SceneSpec::view_name(v);
        let (rgb, depth) = spec.render_analytic(v, true)?;
        let (bg, bg_depth) = spec.render_analytic(v, false)?;
        rgb.save_png(&out.join("images").join(&name)).map_err(raster)?;
        depth.save_pfm(&out.join("depth").join(format!("{name}.depth.pfm"))).map_err(raster)?;
        bg.save_png(&out.join("priors").join(format!("{name}.inpaint.png"))).map_err(raster)?;
        bg_depth.save_pfm(&out.join("priors").join(format!("{name}.depth.pfm"))).map_err(raster)?;
        spec.ground_truth_mask(v)?
            .save_png(&out.join("masks").join(format!("{name}.mask.png")))
            .map_err(|e| SceneError::Io(e.to_string()))?;
    }

    let cam = spec.intrinsics();
    let mut held = Vec::new();
    for k in 0..spec.cameras.count {
        let name = format!("heldout_{k:03}.png");
        let pose = spec.holdout_pose(k);
        let (bg, _) = spec.render_pose(&pose, false);
        let (rgb, _) = spec.render_pose(&pose, true);
        bg.save_png(&out.join("heldout/background").join(&name)).map_err(raster)?;
        rgb.save_png(&out.join("heldout/images").join(&name)).map_err(raster)?;
        held.push(PosedImage {
            image_id: k as u32 + 1,
            name,
            camera_id: 1,
            pose,
            keypoints: Vec::new(),
        });
    }
    let held_model = SparseModel::new([cam], held, [])?;
    write_text_model(&held_model, &out.join("heldout/sparse"))?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pixel_to_ray;

    #[test]
    fn default_spec_is_valid() {
        SceneSpec::default().validate().unwrap();
    }

    #[test]
    fn wall_depth_at_principal_pixel() {
        let mut spec = SceneSpec::default();
        spec.width = 33;
        spec.height = 33;
        let eye = Vec3::new(0.0, 0.2, 0.5);
        let pose = Pose::look_at(eye, Vec3::new(0.0, 0.2, 5.0), Vec3::y());
        let (_, depth) = spec.render_pose(&pose, false);
        assert!((depth.get(16, 16) as f64 - (spec.room.max[2] - eye.z)).abs() < 1e-5);
    }

    #[test]
    fn renders_differ_exactly_on_silhouette() {
        let spec = SceneSpec::default();
        for v in [0, 3] {
            let (a, _) = spec.render_analytic(v, true).unwrap();
            let (b, _) = spec.render_analytic(v, false).unwrap();
            let mask = spec.ground_truth_mask(v).unwrap();
            assert!(mask.count() > 0);
            for y in 0..spec.height {
                for x in 0..spec.width {
                    assert_eq!(a.get(x, y) != b.get(x, y), mask.get(x, y), "pixel {x},{y}");
                }
            }
        }
    }

    #[test]
    fn sphere_silhouette_area() {
        let mut spec = SceneSpec::default();
        spec.width = 256;
        spec.height = 256;
        spec.focal = 200.0;
        spec.room = RoomSpec {
            min: [-10.0, -10.0, -10.0],
            max: [10.0, 10.0, 10.0],
        };
        spec.object.center = [0.0, 0.0, 0.0];
        spec.object.size = 0.3;
        let d = 3.0;
        let pose = Pose::look_at(Vec3::new(0.0, 0.0, -d), Vec3::zeros(), Vec3::y());
        let count = spec.mask_for_pose(&pose).count() as f64;
        let expect = PI * (spec.focal * spec.object.size / d).powi(2);
        assert!((count - expect).abs() / expect < 0.05, "{count} vs {expect}");
    }

    #[test]
    fn masks_at_extremes() {
        let mut spec = SceneSpec::default();
        // Camera looking away from the object.
        let away = Pose::look_at(Vec3::new(0.0, 0.2, 1.0), Vec3::new(0.0, 0.2, 3.0), Vec3::y());
        assert!(spec.mask_for_pose(&away).is_empty());
        // Camera right against the object sees nothing else.
        spec.object.size = 0.9;
        let close = Pose::look_at(Vec3::new(0.0, -0.3, -1.0), v3(spec.object.center), Vec3::y());
        assert_eq!(spec.mask_for_pose(&close).count(), (spec.width * spec.height) as usize);
    }

    #[test]
    fn sparse_model_reprojects_exactly() {
        let spec = SceneSpec {
            keypoints_per_surface: 150,
            ..SceneSpec::default()
        };
        let model = spec.emit_sparse_model(1).unwrap();
        let cam = spec.intrinsics();
        let mut n = 0;
        for img in model.images().values() {
            for kp in &img.keypoints {
                let p = model.points()[&kp.point3d_id.unwrap()].position;
                let px = project_to_pixel(&cam, &img.pose, &p).unwrap();
                assert!((px - kp.xy()).norm() < 1e-6);
                n += 1;
            }
        }
        assert!(n > 300);
    }

    #[test]
    fn single_visible_point_track_spans_all_views() {
        let mut spec = SceneSpec {
            keypoints_per_surface: 1,
            ..SceneSpec::default()
        };
        spec.object.shape = Shape::Sphere;
        // With one point per surface, the object's point may be hidden from some
        // views; check that any point seen by every camera has a full track.
        let model = spec.emit_sparse_model(3).unwrap();
        for p in model.points().values() {
            let seen = (0..spec.cameras.count)
                .filter(|v| {
                    let pose = spec.pose(*v);
                    project_to_pixel(&spec.intrinsics(), &pose, &p.position).is_some()
                        && spec.visible_from(&pose.center(), &p.position)
                })
                .count();
            assert_eq!(p.track.len(), seen);
        }
    }

    #[test]
    fn occluded_point_is_not_a_keypoint() {
        let spec = SceneSpec {
            keypoints_per_surface: 300,
            ..SceneSpec::default()
        };
        let model = spec.emit_sparse_model(5).unwrap();
        let cam = spec.intrinsics();
        let mut occluded = 0;
        for p in model.points().values() {
            for v in 0..spec.cameras.count {
                let pose = spec.pose(v);
                let in_view = project_to_pixel(&cam, &pose, &p.position).is_some();
                let visible = spec.visible_from(&pose.center(), &p.position);
                let registered = p.track.iter().any(|e| e.image_id == v as u32 + 1);
                assert_eq!(registered, in_view && visible);
                if in_view && !visible {
                    occluded += 1;
                }
            }
        }
        assert!(occluded > 0, "fixture should contain occluded projections");
    }

    #[test]
    fn oracle_predictor_any_hit_rule() {
        let spec = SceneSpec::default();
        let pred = oracle_mask_predictor(&spec);
        let truth = spec.ground_truth_mask(2).unwrap();
        let view = ViewInput {
            view_id: 3,
            name: SceneSpec::view_name(2),
            width: spec.width,
            height: spec.height,
            image_path: None,
        };
        let inside = truth.foreground().next().map(|(x, y)| Vec2::new(x as f64, y as f64)).unwrap();
        let wall = Vec2::new(0.0, 0.0);
        assert!(!truth.contains_point(wall));
        assert_eq!(pred.predict(&view, &[inside]).unwrap(), truth);
        assert!(pred.predict(&view, &[wall]).unwrap().is_empty());
        assert_eq!(pred.predict(&view, &[wall, inside]).unwrap(), truth);
    }

    #[test]
    fn pixel_rays_hit_what_render_sees() {
        let spec = SceneSpec::default();
        let pose = spec.pose(1);
        let cam = spec.intrinsics();
        let (_, depth) = spec.render_pose(&pose, true);
        let ray = pixel_to_ray(&cam, &pose, 20.0, 40.0, 0.0, 100.0).unwrap();
        let hit = spec.trace(&ray.origin, &ray.direction, true).unwrap();
        assert!((hit.t - depth.get(20, 40) as f64).abs() < 1e-5);
    }
}
