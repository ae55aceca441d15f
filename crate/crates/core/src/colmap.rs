//! COLMAP sparse reconstruction models (text and binary).
//!
//! Only pinhole camera models are accepted. The parsed [`SparseModel`] is
//! immutable and checks referential integrity in both directions: every
//! keypoint's 3D id exists, and every track element points back at a keypoint
//! carrying that id.
//!
//! Format reference: <https://colmap.github.io/format.html>

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::geometry::{pixel_index, CameraIntrinsics, CameraModel, Pose, Vec2, Vec3};
use crate::mask::{Mask, MaskError};

pub type ImageId = u32;
pub type Point3dId = u64;

#[derive(Debug, Error)]
pub enum ColmapError {
    #[error("missing model file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {reason}")]
    Malformed {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("{file}: truncated at byte offset {offset}")]
    Truncated { file: String, offset: u64 },
    #[error("unsupported camera model {0}")]
    UnsupportedCameraModel(String),
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("unknown image id {0}")]
    UnknownImage(ImageId),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub point3d_id: Option<Point3dId>,
}

impl Keypoint {
    pub fn xy(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosedImage {
    pub image_id: ImageId,
    pub name: String,
    pub camera_id: u32,
    pub pose: Pose,
    pub keypoints: Vec<Keypoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrackElement {
    pub image_id: ImageId,
    pub keypoint_index: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Point3D {
    pub point3d_id: Point3dId,
    pub position: Vec3,
    pub color: [u8; 3],
    pub reproj_error: f64,
    pub track: Vec<TrackElement>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseModel {
    cameras: BTreeMap<u32, CameraIntrinsics>,
    images: BTreeMap<ImageId, PosedImage>,
    points: BTreeMap<Point3dId, Point3D>,
    view_order: Vec<ImageId>,
    clamped_keypoints: usize,
}

impl SparseModel {
    /// Validates and assembles a model. Keypoints outside their image are
    /// clamped into bounds; the number clamped is kept in
    /// [`SparseModel::clamped_keypoints`].
    pub fn new(
        cameras: impl IntoIterator<Item = CameraIntrinsics>,
        images: impl IntoIterator<Item = PosedImage>,
        points: impl IntoIterator<Item = Point3D>,
    ) -> Result<Self, ColmapError> {
        let mut cam_map = BTreeMap::new();
        for cam in cameras {
            cam.validate().map_err(ColmapError::Invalid)?;
            if cam_map.insert(cam.camera_id, cam.clone()).is_some() {
                return Err(ColmapError::Invalid(format!("duplicate camera id {}", cam.camera_id)));
            }
        }
        let mut point_map = BTreeMap::new();
        for p in points {
            let id = p.point3d_id;
            if point_map.insert(id, p).is_some() {
                return Err(ColmapError::Invalid(format!("duplicate point3D id {id}")));
            }
        }
        let mut image_map = BTreeMap::new();
        let mut clamped = 0;
        for mut img in images {
            let cam = cam_map.get(&img.camera_id).ok_or_else(|| {
                ColmapError::DanglingReference(format!(
                    "image {} references camera {}",
                    img.image_id, img.camera_id
                ))
            })?;
            let (w, h) = (cam.width as f64, cam.height as f64);
            for kp in &mut img.keypoints {
                if let Some(pid) = kp.point3d_id {
                    if !point_map.contains_key(&pid) {
                        return Err(ColmapError::DanglingReference(format!(
                            "image {} keypoint references point3D {pid}",
                            img.image_id
                        )));
                    }
                }
                if !(kp.x >= 0.0 && kp.x < w && kp.y >= 0.0 && kp.y < h) {
                    clamped += 1;
                    let below = |lim: f64| lim - lim.max(1.0) * f64::EPSILON;
                    kp.x = kp.x.clamp(0.0, below(w));
                    kp.y = kp.y.clamp(0.0, below(h));
                }
            }
            let id = img.image_id;
            if image_map.insert(id, img).is_some() {
                return Err(ColmapError::Invalid(format!("duplicate image id {id}")));
            }
        }
        for p in point_map.values() {
            for el in &p.track {
                let img = image_map.get(&el.image_id).ok_or_else(|| {
                    ColmapError::DanglingReference(format!(
                        "point3D {} track references image {}",
                        p.point3d_id, el.image_id
                    ))
                })?;
                let kp = img.keypoints.get(el.keypoint_index as usize).ok_or_else(|| {
                    ColmapError::DanglingReference(format!(
                        "point3D {} track references keypoint {} of image {}",
                        p.point3d_id, el.keypoint_index, el.image_id
                    ))
                })?;
                if kp.point3d_id != Some(p.point3d_id) {
                    return Err(ColmapError::DanglingReference(format!(
                        "point3D {} track element ({}, {}) points at a keypoint of point3D {:?}",
                        p.point3d_id, el.image_id, el.keypoint_index, kp.point3d_id
                    )));
                }
            }
        }
        let mut view_order: Vec<ImageId> = image_map.keys().copied().collect();
        view_order.sort_by(|a, b| image_map[a].name.cmp(&image_map[b].name).then(a.cmp(b)));
        Ok(Self {
            cameras: cam_map,
            images: image_map,
            points: point_map,
            view_order,
            clamped_keypoints: clamped,
        })
    }

    pub fn cameras(&self) -> &BTreeMap<u32, CameraIntrinsics> {
        &self.cameras
    }

    pub fn images(&self) -> &BTreeMap<ImageId, PosedImage> {
        &self.images
    }

    pub fn points(&self) -> &BTreeMap<Point3dId, Point3D> {
        &self.points
    }

    /// Image ids ordered by image name.
    pub fn view_order(&self) -> &[ImageId] {
        &self.view_order
    }

    pub fn clamped_keypoints(&self) -> usize {
        self.clamped_keypoints
    }

    pub fn image(&self, id: ImageId) -> Result<&PosedImage, ColmapError> {
        self.images.get(&id).ok_or(ColmapError::UnknownImage(id))
    }

    pub fn camera_of(&self, image: &PosedImage) -> &CameraIntrinsics {
        &self.cameras[&image.camera_id]
    }

    pub fn image_by_name(&self, name: &str) -> Option<&PosedImage> {
        self.images.values().find(|i| i.name == name)
    }

    /// Position of a keypoint of `image` that observes `point`.
    pub fn keypoint_of(&self, image: ImageId, point: Point3dId) -> Option<Vec2> {
        self.images
            .get(&image)?
            .keypoints
            .iter()
            .find(|k| k.point3d_id == Some(point))
            .map(Keypoint::xy)
    }

    /// Field-wise comparison with a float tolerance on all real-valued fields.
    pub fn approx_eq(&self, other: &SparseModel, tol: f64) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= tol;
        let cams = self.cameras.len() == other.cameras.len()
            && self.cameras.iter().zip(&other.cameras).all(|((ia, a), (ib, b))| {
                ia == ib
                    && a.model == b.model
                    && a.width == b.width
                    && a.height == b.height
                    && close(a.fx, b.fx)
                    && close(a.fy, b.fy)
                    && close(a.cx, b.cx)
                    && close(a.cy, b.cy)
            });
        let imgs = self.images.len() == other.images.len()
            && self.images.iter().zip(&other.images).all(|((ia, a), (ib, b))| {
                let qa = a.pose.wxyz();
                let qb = b.pose.wxyz();
                ia == ib
                    && a.name == b.name
                    && a.camera_id == b.camera_id
                    && qa.iter().zip(qb).all(|(x, y)| close(*x, y))
                    && (a.pose.translation - b.pose.translation).amax() <= tol
                    && a.keypoints.len() == b.keypoints.len()
                    && a.keypoints.iter().zip(&b.keypoints).all(|(ka, kb)| {
                        close(ka.x, kb.x) && close(ka.y, kb.y) && ka.point3d_id == kb.point3d_id
                    })
            });
        let pts = self.points.len() == other.points.len()
            && self.points.iter().zip(&other.points).all(|((ia, a), (ib, b))| {
                ia == ib
                    && (a.position - b.position).amax() <= tol
                    && a.color == b.color
                    && close(a.reproj_error, b.reproj_error)
                    && a.track == b.track
            });
        cams && imgs && pts && self.view_order == other.view_order
    }
}

const FILES_TXT: [&str; 3] = ["cameras.txt", "images.txt", "points3D.txt"];
const FILES_BIN: [&str; 3] = ["cameras.bin", "images.bin", "points3D.bin"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelFormat {
    Text,
    Binary,
}

/// Picks the binary model when all three `.bin` files exist, else text.
pub fn detect_format(dir: &Path) -> Option<ModelFormat> {
    if FILES_BIN.iter().all(|f| dir.join(f).is_file()) {
        Some(ModelFormat::Binary)
    } else if FILES_TXT.iter().all(|f| dir.join(f).is_file()) {
        Some(ModelFormat::Text)
    } else {
        None
    }
}

pub fn parse_model(dir: &Path, format: ModelFormat) -> Result<SparseModel, ColmapError> {
    match format {
        ModelFormat::Text => parse_text_model(dir),
        ModelFormat::Binary => parse_binary_model(dir),
    }
}

fn read_file(dir: &Path, name: &str) -> Result<Vec<u8>, ColmapError> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(ColmapError::MissingFile(path));
    }
    std::fs::read(&path).map_err(|source| ColmapError::Io { path, source })
}

/// Data lines of a text model file with 1-based line numbers; comments are
/// dropped but blank lines are kept because an image with no keypoints has
/// an empty second line.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.starts_with('#'))
}

struct Fields<'a> {
    file: &'static str,
    line: usize,
    it: std::str::SplitWhitespace<'a>,
}

impl<'a> Fields<'a> {
    fn new(file: &'static str, line: usize, text: &'a str) -> Self {
        Self {
            file,
            line,
            it: text.split_whitespace(),
        }
    }

    fn err(&self, reason: impl Into<String>) -> ColmapError {
        ColmapError::Malformed {
            file: self.file.to_string(),
            line: self.line,
            reason: reason.into(),
        }
    }

    fn next_str(&mut self, what: &str) -> Result<&'a str, ColmapError> {
        self.it.next().ok_or_else(|| self.err(format!("missing {what}")))
    }

    fn next<T: std::str::FromStr>(&mut self, what: &str) -> Result<T, ColmapError> {
        let s = self.next_str(what)?;
        s.parse().map_err(|_| self.err(format!("bad {what} '{s}'")))
    }

    fn rest(&mut self) -> Vec<&'a str> {
        self.it.by_ref().collect()
    }
}

pub fn parse_text_model(dir: &Path) -> Result<SparseModel, ColmapError> {
    let cam_text = String::from_utf8_lossy(&read_file(dir, FILES_TXT[0])?).into_owned();
    let img_text = String::from_utf8_lossy(&read_file(dir, FILES_TXT[1])?).into_owned();
    let pts_text = String::from_utf8_lossy(&read_file(dir, FILES_TXT[2])?).into_owned();

    let mut cameras = Vec::new();
    for (line, text) in data_lines(&cam_text).filter(|(_, l)| !l.is_empty()) {
        let mut f = Fields::new("cameras.txt", line, text);
        let id: u32 = f.next("camera id")?;
        let model_name = f.next_str("camera model")?;
        let model = CameraModel::from_name(model_name)
            .ok_or_else(|| ColmapError::UnsupportedCameraModel(model_name.to_string()))?;
        let width: u32 = f.next("width")?;
        let height: u32 = f.next("height")?;
        let params = f
            .rest()
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| f.err(format!("bad parameter '{s}'"))))
            .collect::<Result<Vec<_>, _>>()?;
        let cam = CameraIntrinsics::from_params(id, model, width, height, &params).ok_or_else(|| {
            f.err(format!(
                "{} expects {} parameters, got {}",
                model.name(),
                model.num_params(),
                params.len()
            ))
        })?;
        cameras.push(cam);
    }

    let mut images = Vec::new();
    let mut lines = data_lines(&img_text);
    while let Some((line, text)) = lines.next() {
        if text.is_empty() {
            continue;
        }
        let mut f = Fields::new("images.txt", line, text);
        let image_id: ImageId = f.next("image id")?;
        let mut q = [0.0; 4];
        for (i, v) in q.iter_mut().enumerate() {
            *v = f.next(["qw", "qx", "qy", "qz"][i])?;
        }
        let mut t = [0.0; 3];
        for (i, v) in t.iter_mut().enumerate() {
            *v = f.next(["tx", "ty", "tz"][i])?;
        }
        let camera_id: u32 = f.next("camera id")?;
        let name = f.rest().join(" ");
        if name.is_empty() {
            return Err(f.err("missing image name"));
        }
        let (pline, ptext) = lines.next().unwrap_or((line + 1, ""));
        let tokens: Vec<&str> = ptext.split_whitespace().collect();
        let pf = Fields::new("images.txt", pline, ptext);
        if tokens.len() % 3 != 0 {
            return Err(pf.err("POINTS2D entries must be triples (X Y POINT3D_ID)"));
        }
        let mut keypoints = Vec::with_capacity(tokens.len() / 3);
        for chunk in tokens.chunks(3) {
            let x: f64 = chunk[0].parse().map_err(|_| pf.err(format!("bad x '{}'", chunk[0])))?;
            let y: f64 = chunk[1].parse().map_err(|_| pf.err(format!("bad y '{}'", chunk[1])))?;
            let pid: i64 = chunk[2]
                .parse()
                .map_err(|_| pf.err(format!("bad point3D id '{}'", chunk[2])))?;
            keypoints.push(Keypoint {
                x,
                y,
                point3d_id: (pid >= 0).then_some(pid as Point3dId),
            });
        }
        images.push(PosedImage {
            image_id,
            name,
            camera_id,
            pose: Pose::from_wxyz(q, t),
            keypoints,
        });
    }

    let mut points = Vec::new();
    for (line, text) in data_lines(&pts_text).filter(|(_, l)| !l.is_empty()) {
        let mut f = Fields::new("points3D.txt", line, text);
        let id: Point3dId = f.next("point3D id")?;
        let x: f64 = f.next("x")?;
        let y: f64 = f.next("y")?;
        let z: f64 = f.next("z")?;
        let r: u8 = f.next("r")?;
        let g: u8 = f.next("g")?;
        let b: u8 = f.next("b")?;
        let err: f64 = f.next("error")?;
        let rest = f.rest();
        if rest.len() % 2 != 0 {
            return Err(f.err("TRACK entries must be pairs (IMAGE_ID POINT2D_IDX)"));
        }
        let track = rest
            .chunks(2)
            .map(|c| -> Result<TrackElement, ColmapError> {
                Ok(TrackElement {
                    image_id: c[0].parse().map_err(|_| f.err(format!("bad image id '{}'", c[0])))?,
                    keypoint_index: c[1]
                        .parse()
                        .map_err(|_| f.err(format!("bad point2D index '{}'", c[1])))?,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        points.push(Point3D {
            point3d_id: id,
            position: Vec3::new(x, y, z),
            color: [r, g, b],
            reproj_error: err,
            track,
        });
    }

    SparseModel::new(cameras, images, points)
}

struct BinReader<'a> {
    file: &'static str,
    cur: Cursor<&'a [u8]>,
}

impl<'a> BinReader<'a> {
    fn new(file: &'static str, bytes: &'a [u8]) -> Self {
        Self {
            file,
            cur: Cursor::new(bytes),
        }
    }

    fn truncated(&self) -> ColmapError {
        ColmapError::Truncated {
            file: self.file.to_string(),
            offset: self.cur.position(),
        }
    }

    fn wrap<T>(&mut self, f: impl FnOnce(&mut Cursor<&'a [u8]>) -> std::io::Result<T>) -> Result<T, ColmapError> {
        let start = self.cur.position();
        f(&mut self.cur).map_err(|_| {
            self.cur.set_position(start);
            self.truncated()
        })
    }

    fn u8(&mut self) -> Result<u8, ColmapError> {
        self.wrap(|c| c.read_u8())
    }
    fn i32(&mut self) -> Result<i32, ColmapError> {
        self.wrap(|c| c.read_i32::<LittleEndian>())
    }
    fn u64(&mut self) -> Result<u64, ColmapError> {
        self.wrap(|c| c.read_u64::<LittleEndian>())
    }
    fn i64(&mut self) -> Result<i64, ColmapError> {
        self.wrap(|c| c.read_i64::<LittleEndian>())
    }
    fn f64(&mut self) -> Result<f64, ColmapError> {
        self.wrap(|c| c.read_f64::<LittleEndian>())
    }

    fn cstring(&mut self) -> Result<String, ColmapError> {
        let mut bytes = Vec::new();
        loop {
            let mut b = [0u8];
            if self.cur.read(&mut b).map_err(|_| self.truncated())? == 0 {
                return Err(self.truncated());
            }
            if b[0] == 0 {
                break;
            }
            bytes.push(b[0]);
        }
        String::from_utf8(bytes).map_err(|_| ColmapError::Invalid(format!("{}: non-UTF-8 image name", self.file)))
    }

    fn count(&mut self, min_record: u64) -> Result<usize, ColmapError> {
        let n = self.u64()?;
        let remaining = self.cur.get_ref().len() as u64 - self.cur.position();
        if n.saturating_mul(min_record) > remaining {
            return Err(ColmapError::Truncated {
                file: self.file.to_string(),
                offset: self.cur.get_ref().len() as u64,
            });
        }
        Ok(n as usize)
    }
}

pub fn parse_binary_model(dir: &Path) -> Result<SparseModel, ColmapError> {
    let cam_bytes = read_file(dir, FILES_BIN[0])?;
    let img_bytes = read_file(dir, FILES_BIN[1])?;
    let pts_bytes = read_file(dir, FILES_BIN[2])?;

    let mut r = BinReader::new("cameras.bin", &cam_bytes);
    let n = r.count(24)?;
    let mut cameras = Vec::with_capacity(n);
    for _ in 0..n {
        let id = r.i32()?;
        let model_id = r.i32()?;
        let model = CameraModel::from_colmap_id(model_id)
            .ok_or_else(|| ColmapError::UnsupportedCameraModel(format!("id {model_id}")))?;
        let width = r.u64()?;
        let height = r.u64()?;
        let params = (0..model.num_params()).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let (Ok(id), Ok(width), Ok(height)) = (u32::try_from(id), u32::try_from(width), u32::try_from(height)) else {
            return Err(ColmapError::Invalid(format!("camera {id}: id or size out of range")));
        };
        cameras.push(CameraIntrinsics::from_params(id, model, width, height, &params).expect("param count"));
    }

    let mut r = BinReader::new("images.bin", &img_bytes);
    let n = r.count(77)?;
    let mut images = Vec::with_capacity(n);
    for _ in 0..n {
        let image_id = r.i32()?;
        let q = [r.f64()?, r.f64()?, r.f64()?, r.f64()?];
        let t = [r.f64()?, r.f64()?, r.f64()?];
        let camera_id = r.i32()?;
        let name = r.cstring()?;
        let np = r.count(24)?;
        let mut keypoints = Vec::with_capacity(np);
        for _ in 0..np {
            let x = r.f64()?;
            let y = r.f64()?;
            let pid = r.i64()?;
            keypoints.push(Keypoint {
                x,
                y,
                point3d_id: (pid >= 0).then_some(pid as Point3dId),
            });
        }
        let (Ok(image_id), Ok(camera_id)) = (u32::try_from(image_id), u32::try_from(camera_id)) else {
            return Err(ColmapError::Invalid(format!("image {image_id}: negative id")));
        };
        images.push(PosedImage {
            image_id,
            name,
            camera_id,
            pose: Pose::from_wxyz(q, t),
            keypoints,
        });
    }

    let mut r = BinReader::new("points3D.bin", &pts_bytes);
    let n = r.count(43)?;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let id = r.i64()?;
        let pos = Vec3::new(r.f64()?, r.f64()?, r.f64()?);
        let color = [r.u8()?, r.u8()?, r.u8()?];
        let err = r.f64()?;
        let tl = r.count(8)?;
        let mut track = Vec::with_capacity(tl);
        for _ in 0..tl {
            let image_id = r.i32()?;
            let idx = r.i32()?;
            let (Ok(image_id), Ok(keypoint_index)) = (u32::try_from(image_id), u32::try_from(idx)) else {
                return Err(ColmapError::Invalid(format!("point3D {id}: negative track entry")));
            };
            track.push(TrackElement {
                image_id,
                keypoint_index,
            });
        }
        let Ok(id) = Point3dId::try_from(id) else {
            return Err(ColmapError::Invalid(format!("negative point3D id {id}")));
        };
        points.push(Point3D {
            point3d_id: id,
            position: pos,
            color,
            reproj_error: err,
            track,
        });
    }

    SparseModel::new(cameras, images, points)
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), ColmapError> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|source| ColmapError::Io { path, source })
}

/// Writes `cameras.txt`, `images.txt` and `points3D.txt`. Floats use the
/// shortest representation that parses back to the same value.
pub fn write_text_model(model: &SparseModel, dir: &Path) -> Result<(), ColmapError> {
    let mut cams = String::from("# Camera list with one line of data per camera:\n#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    let _ = writeln!(cams, "# Number of cameras: {}", model.cameras.len());
    for c in model.cameras.values() {
        let _ = write!(cams, "{} {} {} {}", c.camera_id, c.model.name(), c.width, c.height);
        for p in c.params() {
            let _ = write!(cams, " {p:?}");
        }
        cams.push('\n');
    }

    let mut imgs = String::from("# Image list with two lines of data per image:\n#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n#   POINTS2D[] as (X, Y, POINT3D_ID)\n");
    let _ = writeln!(imgs, "# Number of images: {}", model.images.len());
    for img in model.images.values() {
        let q = img.pose.wxyz();
        let t = img.pose.translation;
        let _ = writeln!(
            imgs,
            "{} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {} {}",
            img.image_id, q[0], q[1], q[2], q[3], t.x, t.y, t.z, img.camera_id, img.name
        );
        let kps: Vec<String> = img
            .keypoints
            .iter()
            .map(|k| {
                let pid = k.point3d_id.map_or(-1, |p| p as i64);
                format!("{:?} {:?} {}", k.x, k.y, pid)
            })
            .collect();
        imgs.push_str(&kps.join(" "));
        imgs.push('\n');
    }

    let mut pts = String::from("# 3D point list with one line of data per point:\n#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
    let _ = writeln!(pts, "# Number of points: {}", model.points.len());
    for p in model.points.values() {
        let _ = write!(
            pts,
            "{} {:?} {:?} {:?} {} {} {} {:?}",
            p.point3d_id, p.position.x, p.position.y, p.position.z, p.color[0], p.color[1], p.color[2], p.reproj_error
        );
        for el in &p.track {
            let _ = write!(pts, " {} {}", el.image_id, el.keypoint_index);
        }
        pts.push('\n');
    }

    write_file(dir, FILES_TXT[0], cams.as_bytes())?;
    write_file(dir, FILES_TXT[1], imgs.as_bytes())?;
    write_file(dir, FILES_TXT[2], pts.as_bytes())
}

/// Writes the little-endian binary layout read by [`parse_binary_model`].
pub fn write_binary_model(model: &SparseModel, dir: &Path) -> Result<(), ColmapError> {
    let io = |source| ColmapError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut cams = Vec::new();
    cams.write_u64::<LittleEndian>(model.cameras.len() as u64).map_err(io)?;
    for c in model.cameras.values() {
        cams.write_i32::<LittleEndian>(c.camera_id as i32).map_err(io)?;
        cams.write_i32::<LittleEndian>(c.model.colmap_id()).map_err(io)?;
        cams.write_u64::<LittleEndian>(c.width as u64).map_err(io)?;
        cams.write_u64::<LittleEndian>(c.height as u64).map_err(io)?;
        for p in c.params() {
            cams.write_f64::<LittleEndian>(p).map_err(io)?;
        }
    }

    let mut imgs = Vec::new();
    imgs.write_u64::<LittleEndian>(model.images.len() as u64).map_err(io)?;
    for img in model.images.values() {
        imgs.write_i32::<LittleEndian>(img.image_id as i32).map_err(io)?;
        for v in img.pose.wxyz() {
            imgs.write_f64::<LittleEndian>(v).map_err(io)?;
        }
        for v in img.pose.translation.iter() {
            imgs.write_f64::<LittleEndian>(*v).map_err(io)?;
        }
        imgs.write_i32::<LittleEndian>(img.camera_id as i32).map_err(io)?;
        imgs.write_all(img.name.as_bytes()).map_err(io)?;
        imgs.write_u8(0).map_err(io)?;
        imgs.write_u64::<LittleEndian>(img.keypoints.len() as u64).map_err(io)?;
        for k in &img.keypoints {
            imgs.write_f64::<LittleEndian>(k.x).map_err(io)?;
            imgs.write_f64::<LittleEndian>(k.y).map_err(io)?;
            imgs.write_i64::<LittleEndian>(k.point3d_id.map_or(-1, |p| p as i64)).map_err(io)?;
        }
    }

    let mut pts = Vec::new();
    pts.write_u64::<LittleEndian>(model.points.len() as u64).map_err(io)?;
    for p in model.points.values() {
        pts.write_i64::<LittleEndian>(p.point3d_id as i64).map_err(io)?;
        for v in p.position.iter() {
            pts.write_f64::<LittleEndian>(*v).map_err(io)?;
        }
        pts.write_all(&p.color).map_err(io)?;
        pts.write_f64::<LittleEndian>(p.reproj_error).map_err(io)?;
        pts.write_u64::<LittleEndian>(p.track.len() as u64).map_err(io)?;
        for el in &p.track {
            pts.write_i32::<LittleEndian>(el.image_id as i32).map_err(io)?;
            pts.write_i32::<LittleEndian>(el.keypoint_index as i32).map_err(io)?;
        }
    }

    write_file(dir, FILES_BIN[0], &cams)?;
    write_file(dir, FILES_BIN[1], &imgs)?;
    write_file(dir, FILES_BIN[2], &pts)
}

/// Keypoints of `view` that have a 3D point and fall on mask foreground.
pub fn masked_keypoints(
    model: &SparseModel,
    view: ImageId,
    mask: &Mask,
) -> Result<Vec<(Vec2, Point3dId)>, ColmapError> {
    let img = model.image(view)?;
    let cam = model.camera_of(img);
    mask.check_dims(cam.width, cam.height)?;
    Ok(img
        .keypoints
        .iter()
        .filter_map(|k| {
            let pid = k.point3d_id?;
            let (x, y) = (pixel_index(k.x), pixel_index(k.y));
            let inside = x >= 0 && y >= 0 && x < cam.width as i64 && y < cam.height as i64;
            (inside && mask.get(x as u32, y as u32)).then_some((k.xy(), pid))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER_ONLY: &str = "# nothing here\n";

    fn write_txt(dir: &Path, cams: &str, imgs: &str, pts: &str) {
        std::fs::write(dir.join("cameras.txt"), cams).unwrap();
        std::fs::write(dir.join("images.txt"), imgs).unwrap();
        std::fs::write(dir.join("points3D.txt"), pts).unwrap();
    }

    fn one_point_fixture(dir: &Path) {
        write_txt(
            dir,
            "# cams\n1 PINHOLE 100 100 90 90 50 50\n",
            "# imgs\n1 1 0 0 0 0 0 0 1 a.png\n50 50 1 10 10 -1\n",
            "# pts\n1 0 0 5 255 0 0 0.5 1 0\n",
        );
    }

    #[test]
    fn empty_text_model() {
        let dir = tempfile::tempdir().unwrap();
        write_txt(dir.path(), HEADER_ONLY, HEADER_ONLY, HEADER_ONLY);
        let m = parse_text_model(dir.path()).unwrap();
        assert!(m.cameras().is_empty() && m.images().is_empty() && m.points().is_empty());
    }

    #[test]
    fn single_point_lookup() {
        let dir = tempfile::tempdir().unwrap();
        one_point_fixture(dir.path());
        let m = parse_text_model(dir.path()).unwrap();
        assert_eq!(m.keypoint_of(1, 1), Some(Vec2::new(50.0, 50.0)));
        let img = m.image(1).unwrap();
        assert_eq!(img.keypoints.len(), 2);
        assert_eq!(img.keypoints[1].point3d_id, None);
        assert_eq!(m.points()[&1].position, Vec3::new(0.0, 0.0, 5.0));
        assert_eq!(m.camera_of(img).fx, 90.0);
    }

    #[test]
    fn dangling_keypoint_reference() {
        let dir = tempfile::tempdir().unwrap();
        write_txt(
            dir.path(),
            "1 PINHOLE 100 100 90 90 50 50\n",
            "1 1 0 0 0 0 0 0 1 a.png\n50 50 99\n",
            "",
        );
        assert!(matches!(parse_text_model(dir.path()), Err(ColmapError::DanglingReference(_))));
    }

    #[test]
    fn track_must_point_back() {
        let dir = tempfile::tempdir().unwrap();
        write_txt(
            dir.path(),
            "1 PINHOLE 100 100 90 90 50 50\n",
            "1 1 0 0 0 0 0 0 1 a.png\n50 50 1 3 3 -1\n",
            "1 0 0 5 255 0 0 0.5 1 1\n",
        );
        assert!(matches!(parse_text_model(dir.path()), Err(ColmapError::DanglingReference(_))));
    }

    #[test]
    fn malformed_line_reports_location() {
        let dir = tempfile::tempdir().unwrap();
        write_txt(dir.path(), "# c\n# c\n1 PINHOLE 100 abc 90 90 50 50\n", "", "");
        match parse_text_model(dir.path()) {
            Err(ColmapError::Malformed { file, line, .. }) => {
                assert_eq!(file, "cameras.txt");
                assert_eq!(line, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("cameras.txt"), "").unwrap();
        assert!(matches!(parse_text_model(dir.path()), Err(ColmapError::MissingFile(_))));
    }

    #[test]
    fn unsupported_camera_model() {
        let dir = tempfile::tempdir().unwrap();
        write_txt(dir.path(), "1 OPENCV 100 100 90 90 50 50 0 0 0 0\n", "", "");
        assert!(matches!(
            parse_text_model(dir.path()),
            Err(ColmapError::UnsupportedCameraModel(_))
        ));
    }

    #[test]
    fn image_without_keypoints_keeps_blank_line() {
        let dir = tempfile::tempdir().unwrap();
        write_txt(
            dir.path(),
            "1 SIMPLE_PINHOLE 10 10 5 5 5\n",
            "2 1 0 0 0 0 0 0 1 b.png\n\n1 1 0 0 0 0 0 0 1 a.png\n1 1 -1\n",
            "",
        );
        let m = parse_text_model(dir.path()).unwrap();
        assert_eq!(m.view_order(), &[1, 2]);
        assert!(m.image(2).unwrap().keypoints.is_empty());
        assert_eq!(m.image(1).unwrap().keypoints.len(), 1);
    }

    #[test]
    fn out_of_bounds_keypoints_are_clamped() {
        let dir = tempfile::tempdir().unwrap();
        write_txt(
            dir.path(),
            "1 PINHOLE 10 10 5 5 5 5\n",
            "1 1 0 0 0 0 0 0 1 a.png\n12 -1 -1 3 3 -1\n",
            "",
        );
        let m = parse_text_model(dir.path()).unwrap();
        assert_eq!(m.clamped_keypoints(), 1);
        let k = m.image(1).unwrap().keypoints[0];
        assert!(k.x < 10.0 && k.x > 9.99 && k.y == 0.0);
    }

    #[test]
    fn empty_binary_model_and_header_only_text() {
        let dir = tempfile::tempdir().unwrap();
        let empty = SparseModel::default();
        write_binary_model(&empty, dir.path()).unwrap();
        assert_eq!(std::fs::read(dir.path().join("cameras.bin")).unwrap(), vec![0u8; 8]);
        assert_eq!(parse_binary_model(dir.path()).unwrap(), empty);
        write_text_model(&empty, dir.path()).unwrap();
        for f in FILES_TXT {
            let text = std::fs::read_to_string(dir.path().join(f)).unwrap();
            assert!(text.lines().all(|l| l.starts_with('#')), "{f}: {text}");
        }
        assert_eq!(parse_text_model(dir.path()).unwrap(), empty);
    }

    #[test]
    fn binary_truncation_names_offset() {
        let dir = tempfile::tempdir().unwrap();
        one_point_fixture(dir.path());
        let m = parse_text_model(dir.path()).unwrap();
        write_binary_model(&m, dir.path()).unwrap();
        let path = dir.path().join("images.bin");
        let bytes = std::fs::read(&path).unwrap();
        // count(8) + id(4) + quaternion(32) + 10 bytes into the translation.
        std::fs::write(&path, &bytes[..54]).unwrap();
        match parse_binary_model(dir.path()) {
            Err(ColmapError::Truncated { file, offset }) => {
                assert_eq!(file, "images.bin");
                assert!(offset <= 54, "offset {offset}");
                assert!(offset >= 44, "offset {offset}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unwritable_dir_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("does/not/exist");
        assert!(matches!(
            write_text_model(&SparseModel::default(), &missing),
            Err(ColmapError::Io { .. })
        ));
    }

    #[test]
    fn masked_keypoint_selection() {
        let dir = tempfile::tempdir().unwrap();
        one_point_fixture(dir.path());
        let m = parse_text_model(dir.path()).unwrap();
        assert!(masked_keypoints(&m, 1, &Mask::new(100, 100)).unwrap().is_empty());
        let all = masked_keypoints(&m, 1, &Mask::full(100, 100)).unwrap();
        assert_eq!(all, vec![(Vec2::new(50.0, 50.0), 1)]);
        assert!(matches!(
            masked_keypoints(&m, 1, &Mask::new(10, 100)),
            Err(ColmapError::Mask(MaskError::DimensionMismatch { .. }))
        ));
        assert!(matches!(masked_keypoints(&m, 7, &Mask::full(100, 100)), Err(ColmapError::UnknownImage(7))));
    }
}
