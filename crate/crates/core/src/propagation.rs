//! Spreading a single-view point prompt to every view of a scene.
//!
//! Keypoints of the annotated view that fall inside the initial mask are
//! lifted to their 3D points and reprojected into each view. The user's
//! points are snapped to the nearest masked keypoint and carried along the
//! same 2D-3D-2D path as anchors; each view then keeps the `m` reprojected
//! points nearest those anchors, `m` being the number of user points.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colmap::{masked_keypoints, ColmapError, ImageId, Point3dId, SparseModel};
use crate::geometry::{project_to_pixel, project_unbounded, Vec2, Vec3};
use crate::mask::{Mask, MaskError};

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("external predictor failed: {0}")]
    External(String),
    #[error("predictor needs an image file for view {0}")]
    MissingImage(ImageId),
    #[error("view {view}: {source}")]
    Mask {
        view: ImageId,
        #[source]
        source: MaskError,
    },
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Error)]
pub enum PropagationError {
    #[error("annotated view {0} is not in the model")]
    ViewAbsent(ImageId),
    #[error("no sparse correspondence under mask in view {0}")]
    NoSparseCorrespondence(ImageId),
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),
    #[error("empty candidate list")]
    EmptyCandidates,
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("detector found no box for '{0}'")]
    NoDetection(String),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Colmap(#[from] ColmapError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointPrompt {
    pub view_id: ImageId,
    pub points: Vec<Vec2>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptSource {
    Points,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPrompt {
    pub view_id: ImageId,
    pub name: String,
    pub points: Vec<Vec2>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewDiagnostic {
    pub view_id: ImageId,
    pub reason: String,
}

/// Per-view point prompts, in view order.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub views: Vec<ViewPrompt>,
    pub m: usize,
    pub source: PromptSource,
    pub diagnostics: Vec<ViewDiagnostic>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointJson {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPromptJson {
    pub view_id: ImageId,
    pub name: String,
    pub points: Vec<PointJson>,
}

/// On-disk prompt file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptFile {
    pub views: Vec<ViewPromptJson>,
    pub m: usize,
    pub source: PromptSource,
}

pub fn points_to_json(points: &[Vec2]) -> Vec<PointJson> {
    points.iter().map(|p| PointJson { x: p.x, y: p.y }).collect()
}

pub fn points_from_json(points: &[PointJson]) -> Vec<Vec2> {
    points.iter().map(|p| Vec2::new(p.x, p.y)).collect()
}

impl PromptSet {
    pub fn to_file(&self) -> PromptFile {
        PromptFile {
            views: self
                .views
                .iter()
                .map(|v| ViewPromptJson {
                    view_id: v.view_id,
                    name: v.name.clone(),
                    points: points_to_json(&v.points),
                })
                .collect(),
            m: self.m,
            source: self.source,
        }
    }

    pub fn from_file(file: PromptFile) -> Self {
        Self {
            views: file
                .views
                .into_iter()
                .map(|v| ViewPrompt {
                    view_id: v.view_id,
                    name: v.name,
                    points: points_from_json(&v.points),
                })
                .collect(),
            m: file.m,
            source: file.source,
            diagnostics: Vec::new(),
        }
    }

    pub fn save_json(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file()).map_err(std::io::Error::other)?;
        std::fs::write(path, text + "\n")
    }

    pub fn load_json(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: PromptFile = serde_json::from_str(&text).map_err(std::io::Error::other)?;
        Ok(Self::from_file(file))
    }

    pub fn view(&self, id: ImageId) -> Option<&ViewPrompt> {
        self.views.iter().find(|v| v.view_id == id)
    }
}

/// Indices of the `k` candidates closest to `query`, nearest first, ties
/// broken by lower index.
pub fn nearest_keypoints(candidates: &[Vec2], query: Vec2, k: usize) -> Result<Vec<usize>, PropagationError> {
    if candidates.is_empty() {
        return Err(PropagationError::EmptyCandidates);
    }
    let mut order: Vec<(f64, usize)> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| ((c - query).norm_squared(), i))
        .collect();
    let k = k.max(1).min(order.len());
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_by(cmp);
    Ok(order.into_iter().map(|(_, i)| i).collect())
}

pub fn propagate_points(
    model: &SparseModel,
    initial: &PointPrompt,
    initial_mask: &Mask,
) -> Result<PromptSet, PropagationError> {
    let view1 = model
        .images()
        .get(&initial.view_id)
        .ok_or(PropagationError::ViewAbsent(initial.view_id))?;
    let cam1 = model.camera_of(view1);
    let m = initial.points.len();
    if m == 0 {
        return Err(PropagationError::InvalidPrompt("no prompt points".into()));
    }
    if let Some(p) = initial.points.iter().find(|p| !cam1.contains(**p)) {
        return Err(PropagationError::InvalidPrompt(format!(
            "point ({}, {}) outside view {}",
            p.x, p.y, initial.view_id
        )));
    }

    let masked = masked_keypoints(model, initial.view_id, initial_mask)?;
    if masked.is_empty() {
        return Err(PropagationError::NoSparseCorrespondence(initial.view_id));
    }

    // Lifted cloud, one entry per distinct 3D point in first-seen order.
    let mut seen = HashSet::new();
    let cloud: Vec<(Point3dId, Vec3)> = masked
        .iter()
        .filter(|(_, pid)| seen.insert(*pid))
        .map(|(_, pid)| (*pid, model.points()[pid].position))
        .collect();

    let masked_xy: Vec<Vec2> = masked.iter().map(|(xy, _)| *xy).collect();
    let anchors_3d: Vec<Vec3> = initial
        .points
        .iter()
        .map(|q| {
            let idx = nearest_keypoints(&masked_xy, *q, 1).map(|v| v[0])?;
            Ok(model.points()[&masked[idx].1].position)
        })
        .collect::<Result<_, PropagationError>>()?;

    let mut views = Vec::with_capacity(model.view_order().len());
    let mut diagnostics = Vec::new();
    if cloud.len() < m {
        diagnostics.push(ViewDiagnostic {
            view_id: initial.view_id,
            reason: format!("only {} sparse points under the mask for {m} prompt points", cloud.len()),
        });
    }

    for &vid in model.view_order() {
        let img = &model.images()[&vid];
        let cam = model.camera_of(img);
        let projected: Vec<Vec2> = cloud
            .iter()
            .filter_map(|(_, p)| project_to_pixel(cam, &img.pose, p))
            .collect();
        if projected.is_empty() {
            diagnostics.push(ViewDiagnostic {
                view_id: vid,
                reason: "all projections behind the camera or outside the image".into(),
            });
            views.push(ViewPrompt {
                view_id: vid,
                name: img.name.clone(),
                points: Vec::new(),
            });
            continue;
        }

        let mut anchors: Vec<Vec2> = anchors_3d
            .iter()
            .filter_map(|p| project_unbounded(cam, &img.pose, p))
            .collect();
        if anchors.is_empty() {
            let sum = projected.iter().fold(Vec2::zeros(), |a, b| a + b);
            anchors.push(sum / projected.len() as f64);
            diagnostics.push(ViewDiagnostic {
                view_id: vid,
                reason: "prompt anchors behind the camera; using projected centroid".into(),
            });
        }

        let rankings: Vec<Vec<usize>> = anchors
            .iter()
            .map(|a| nearest_keypoints(&projected, *a, m))
            .collect::<Result<_, _>>()?;
        let mut chosen = Vec::with_capacity(m);
        let mut taken = HashSet::new();
        'fill: for rank in 0..m {
            for ranking in &rankings {
                if let Some(&idx) = ranking.get(rank) {
                    if taken.insert(idx) {
                        chosen.push(projected[idx]);
                        if chosen.len() == m {
                            break 'fill;
                        }
                    }
                }
            }
        }
        if chosen.len() < m {
            diagnostics.push(ViewDiagnostic {
                view_id: vid,
                reason: format!("{} of {m} points survived visibility filtering", chosen.len()),
            });
        }
        views.push(ViewPrompt {
            view_id: vid,
            name: img.name.clone(),
            points: chosen,
        });
    }

    Ok(PromptSet {
        views,
        m,
        source: PromptSource::Points,
        diagnostics,
    })
}

/// First and last foreground pixels in row-major order plus the foreground
/// pixel nearest the foreground centroid, with duplicates removed.
pub fn sample_points_from_mask(mask: &Mask) -> Result<Vec<Vec2>, PropagationError> {
    let mut first = None;
    let mut last = None;
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (x, y) in mask.foreground() {
        first.get_or_insert((x, y));
        last = Some((x, y));
        sx += x as f64;
        sy += y as f64;
        n += 1;
    }
    let (Some(first), Some(last)) = (first, last) else {
        return Err(PropagationError::EmptyMask);
    };
    let (cx, cy) = (sx / n as f64, sy / n as f64);
    let mut center = first;
    let mut best = f64::INFINITY;
    for (x, y) in mask.foreground() {
        let d = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
        if d < best {
            best = d;
            center = (x, y);
        }
    }
    let mut out: Vec<(u32, u32)> = Vec::with_capacity(3);
    for p in [first, last, center] {
        if !out.contains(&p) {
            out.push(p);
        }
    }
    Ok(out.into_iter().map(|(x, y)| Vec2::new(x as f64, y as f64)).collect())
}

/// What a predictor is told about a view.
#[derive(Debug, Clone)]
pub struct ViewInput {
    pub view_id: ImageId,
    pub name: String,
    pub width: u32,
    pub height: u32,
    pub image_path: Option<PathBuf>,
}

impl ViewInput {
    /// One entry per model view, in view order, with images looked up in `image_dir`.
    pub fn from_model(model: &SparseModel, image_dir: Option<&Path>) -> Vec<ViewInput> {
        model
            .view_order()
            .iter()
            .map(|id| {
                let img = &model.images()[id];
                let cam = model.camera_of(img);
                ViewInput {
                    view_id: *id,
                    name: img.name.clone(),
                    width: cam.width,
                    height: cam.height,
                    image_path: image_dir.map(|d| d.join(&img.name)),
                }
            })
            .collect()
    }
}

/// Maps an image plus positive point prompts to a binary mask.
pub trait MaskPredictor: Send + Sync {
    fn predict(&self, view: &ViewInput, points: &[Vec2]) -> Result<Mask, PredictorError>;
}

/// Masks for every prompted view, keyed by view id.
#[derive(Debug, Clone, Default)]
pub struct MaskStack {
    pub masks: BTreeMap<ImageId, Mask>,
    pub failures: BTreeMap<ImageId, String>,
    pub diagnostics: Vec<ViewDiagnostic>,
}

impl MaskStack {
    /// Writes `<image_name>.mask.png` for every mask.
    pub fn save(&self, views: &[ViewInput], dir: &Path) -> Result<(), MaskError> {
        for v in views {
            if let Some(m) = self.masks.get(&v.view_id) {
                m.save_png(&dir.join(format!("{}.mask.png", v.name)))?;
            }
        }
        Ok(())
    }
}

fn checked_predict(
    predictor: &dyn MaskPredictor,
    view: &ViewInput,
    points: &[Vec2],
) -> Result<(Mask, Option<String>), PredictorError> {
    let mask = predictor.predict(view, points)?;
    mask.check_dims(view.width, view.height).map_err(|source| PredictorError::Mask {
        view: view.view_id,
        source,
    })?;
    let missed = points.iter().filter(|p| !mask.contains_point(**p)).count();
    let note = (missed > 0).then(|| {
        let msg = format!("{missed} prompt point(s) fell on mask background");
        log::warn!("view {}: {msg}", view.view_id);
        msg
    });
    Ok((mask, note))
}

pub fn predict_masks(predictor: &dyn MaskPredictor, views: &[ViewInput], prompts: &PromptSet) -> MaskStack {
    let mut stack = MaskStack::default();
    for vp in &prompts.views {
        let Some(view) = views.iter().find(|v| v.view_id == vp.view_id) else {
            stack.failures.insert(vp.view_id, "no image for prompted view".into());
            continue;
        };
        if vp.points.is_empty() {
            stack.masks.insert(vp.view_id, Mask::new(view.width, view.height));
            stack.diagnostics.push(ViewDiagnostic {
                view_id: vp.view_id,
                reason: "no propagated points; empty mask".into(),
            });
            continue;
        }
        match checked_predict(predictor, view, &vp.points) {
            Ok((mask, note)) => {
                if let Some(reason) = note {
                    stack.diagnostics.push(ViewDiagnostic {
                        view_id: vp.view_id,
                        reason,
                    });
                }
                stack.masks.insert(vp.view_id, mask);
            }
            Err(e) => {
                stack.failures.insert(vp.view_id, e.to_string());
            }
        }
    }
    stack
}

/// Points path: predict the initial mask from the user's points, then propagate.
pub fn run_points_prompt(
    model: &SparseModel,
    predictor: &dyn MaskPredictor,
    view: &ViewInput,
    points: &[Vec2],
) -> Result<(PromptSet, Mask), PropagationError> {
    let prompt = PointPrompt {
        view_id: view.view_id,
        points: points.to_vec(),
    };
    if !model.images().contains_key(&view.view_id) {
        return Err(PropagationError::ViewAbsent(view.view_id));
    }
    let (mask, _) = checked_predict(predictor, view, points)?;
    let set = propagate_points(model, &prompt, &mask)?;
    Ok((set, mask))
}

/// A detection from a text-conditioned box detector. Box corners are
/// inclusive pixel coordinates; `mask` is set when the detector also
/// segments.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: [u32; 4],
    pub mask: Option<Mask>,
}

impl Detection {
    pub fn region(&self, width: u32, height: u32) -> Mask {
        match &self.mask {
            Some(m) => m.clone(),
            None => {
                let [x0, y0, x1, y1] = self.bbox;
                Mask::from_rect(width, height, x0, y0, x1, y1)
            }
        }
    }
}

pub trait BoxDetector: Send + Sync {
    fn detect(&self, view: &ViewInput, text: &str) -> Result<Option<Detection>, PredictorError>;
}

/// Text path: detect on the annotated view, sample points from the detected
/// region, then run the points path.
pub fn run_text_prompt(
    model: &SparseModel,
    detector: &dyn BoxDetector,
    predictor: &dyn MaskPredictor,
    view: &ViewInput,
    text: &str,
) -> Result<PromptSet, PropagationError> {
    let det = detector
        .detect(view, text)?
        .ok_or_else(|| PropagationError::NoDetection(text.to_string()))?;
    let region = det.region(view.width, view.height);
    region.check_dims(view.width, view.height).map_err(|source| PredictorError::Mask {
        view: view.view_id,
        source,
    })?;
    let points = sample_points_from_mask(&region)?;
    let (mut set, _) = run_points_prompt(model, predictor, view, &points)?;
    set.source = PromptSource::Text;
    Ok(set)
}

/// Splits an `exec:` command line into program and leading arguments.
fn split_command(cmd: &str) -> Result<(String, Vec<String>), PredictorError> {
    let mut parts = cmd.split_whitespace().map(str::to_string);
    let program = parts
        .next()
        .ok_or_else(|| PredictorError::External("empty command".into()))?;
    Ok((program, parts.collect()))
}

fn run_child(program: &str, args: &[String], extra: &[&std::ffi::OsStr]) -> Result<(), PredictorError> {
    let out = Command::new(program)
        .args(args)
        .args(extra)
        .output()
        .map_err(|e| PredictorError::External(format!("{program}: {e}")))?;
    if !out.status.success() {
        return Err(PredictorError::External(format!(
            "{program} exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    Ok(())
}

/// Mask predictor run as a child process:
/// `CMD <image_path> <prompt_json_path> <out_mask_path>`.
#[derive(Debug, Clone)]
pub struct ExecPredictor {
    program: String,
    args: Vec<String>,
}

impl ExecPredictor {
    pub fn new(cmd: &str) -> Result<Self, PredictorError> {
        let (program, args) = split_command(cmd)?;
        Ok(Self { program, args })
    }
}

impl MaskPredictor for ExecPredictor {
    fn predict(&self, view: &ViewInput, points: &[Vec2]) -> Result<Mask, PredictorError> {
        let image = view
            .image_path
            .as_ref()
            .ok_or(PredictorError::MissingImage(view.view_id))?;
        let work = tempfile::tempdir().map_err(|e| PredictorError::Io(e.to_string()))?;
        let prompt_path = work.path().join("prompt.json");
        let out_path = work.path().join(format!("{}.mask.png", view.name));
        let file = PromptFile {
            views: vec![ViewPromptJson {
                view_id: view.view_id,
                name: view.name.clone(),
                points: points_to_json(points),
            }],
            m: points.len(),
            source: PromptSource::Points,
        };
        let text = serde_json::to_string(&file).map_err(|e| PredictorError::Io(e.to_string()))?;
        std::fs::write(&prompt_path, text).map_err(|e| PredictorError::Io(e.to_string()))?;
        run_child(
            &self.program,
            &self.args,
            &[image.as_os_str(), prompt_path.as_os_str(), out_path.as_os_str()],
        )?;
        Mask::load_png(&out_path).map_err(|source| PredictorError::Mask {
            view: view.view_id,
            source,
        })
    }
}

#[derive(Debug, Deserialize)]
struct DetectionJson {
    #[serde(rename = "box")]
    bbox: Option<[u32; 4]>,
    #[serde(default)]
    mask: Option<PathBuf>,
}

/// Box detector run as a child process: `CMD <image_path> <text> <out_json_path>`.
/// The output JSON is `{"box": [x0, y0, x1, y1] | null, "mask": "<png path>"?}`.
#[derive(Debug, Clone)]
pub struct ExecDetector {
    program: String,
    args: Vec<String>,
}

impl ExecDetector {
    pub fn new(cmd: &str) -> Result<Self, PredictorError> {
        let (program, args) = split_command(cmd)?;
        Ok(Self { program, args })
    }
}

impl BoxDetector for ExecDetector {
    fn detect(&self, view: &ViewInput, text: &str) -> Result<Option<Detection>, PredictorError> {
        let image = view
            .image_path
            .as_ref()
            .ok_or(PredictorError::MissingImage(view.view_id))?;
        let work = tempfile::tempdir().map_err(|e| PredictorError::Io(e.to_string()))?;
        let out_path = work.path().join("detection.json");
        run_child(
            &self.program,
            &self.args,
            &[image.as_os_str(), std::ffi::OsStr::new(text), out_path.as_os_str()],
        )?;
        let raw = std::fs::read_to_string(&out_path).map_err(|e| PredictorError::Io(e.to_string()))?;
        let parsed: DetectionJson =
            serde_json::from_str(&raw).map_err(|e| PredictorError::External(format!("bad detection JSON: {e}")))?;
        let Some(bbox) = parsed.bbox else {
            return Ok(None);
        };
        let mask = match parsed.mask {
            Some(p) => Some(Mask::load_png(&p).map_err(|source| PredictorError::Mask {
                view: view.view_id,
                source,
            })?),
            None => None,
        };
        Ok(Some(Detection { bbox, mask }))
    }
}
