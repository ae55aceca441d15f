//! Retraining a voxel field on inpainted priors.
//!
//! The objective is `a * L_c + b * L_d + c * L_p` over a batch of rays drawn
//! uniformly from every pixel of every view plus, when enabled, a batch of
//! square patches centered inside the object masks:
//!
//! * `L_c`: squared color error against the color priors,
//! * `L_d`: squared depth error against the depth priors, on all rays
//!   (`da`), on rays inside the mask only (`dp`), or not at all (`dir`),
//! * `L_p`: a patch appearance term. This is a moment-matching surrogate,
//!   not LPIPS: per patch it compares channel means and 3x3 channel
//!   covariances, `|mu_P - mu_Q|^2 + |Sigma_P - Sigma_Q|_F^2`, averaged over
//!   the patch batch.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colmap::SparseModel;
use crate::field::{ray_seed, render_ray, render_ray_backward, FieldGrad, Stratification, VoxelField};
use crate::geometry::{pixel_direction, CameraIntrinsics, Pose, Ray};
use crate::mask::Mask;
use crate::raster::{ColorImage, DepthMap, RasterError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("size mismatch: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("inconsistent supervision: {0}")]
    Supervision(String),
    #[error("non-finite loss at step {step}: {parts:?}")]
    NonFinite { step: usize, parts: LossParts },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DepthMode {
    /// No depth supervision.
    #[serde(rename = "dir")]
    None,
    /// Depth loss only on rays whose pixel is inside the mask.
    #[serde(rename = "dp")]
    MaskedOnly,
    /// Depth loss on every ray.
    #[serde(rename = "da")]
    All,
}

impl std::str::FromStr for DepthMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dir" => Ok(DepthMode::None),
            "dp" => Ok(DepthMode::MaskedOnly),
            "da" => Ok(DepthMode::All),
            other => Err(format!("unknown depth mode '{other}' (expected dir, dp or da)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub resolution: [usize; 3],
    /// Field bounds; derived from the sparse points when absent.
    pub bounds: Option<[[f64; 3]; 2]>,
    pub init_density: f64,
    pub init_color: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            resolution: [32, 32, 32],
            bounds: None,
            init_density: -2.0,
            init_color: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub color_weight: f64,
    pub depth_weight: f64,
    pub perceptual_weight: f64,
    pub depth_mode: DepthMode,
    pub perceptual: bool,
    pub ray_batch: usize,
    pub patch_size: usize,
    pub patch_batch: usize,
    pub n_samples: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub t_near: f64,
    pub t_far: f64,
    pub grid: GridConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            color_weight: 1.0,
            depth_weight: 0.1,
            perceptual_weight: 0.01,
            depth_mode: DepthMode::All,
            perceptual: true,
            ray_batch: 1024,
            patch_size: 32,
            patch_batch: 4,
            n_samples: 64,
            steps: 2000,
            lr: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            t_near: 0.05,
            t_far: 6.0,
            grid: GridConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let weights = [self.color_weight, self.depth_weight, self.perceptual_weight];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(TrainError::Config("loss weights must be finite and non-negative".into()));
        }
        if self.patch_size < 4 {
            return Err(TrainError::Config("patch_size must be at least 4".into()));
        }
        if self.n_samples < 2 {
            return Err(TrainError::Config("n_samples must be at least 2".into()));
        }
        if self.ray_batch == 0 {
            return Err(TrainError::Config("ray_batch must be positive".into()));
        }
        if !(self.t_near >= 0.0 && self.t_near < self.t_far) {
            return Err(TrainError::Config("need 0 <= t_near < t_far".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::Config("bad optimizer settings".into()));
        }
        Ok(())
    }

    fn effective_depth_weight(&self) -> f64 {
        match self.depth_mode {
            DepthMode::None => 0.0,
            _ => self.depth_weight,
        }
    }
}

/// One supervised view: camera plus color prior, depth prior and object mask.
#[derive(Debug, Clone)]
pub struct SupervisedView {
    pub name: String,
    pub camera: CameraIntrinsics,
    pub pose: Pose,
    pub color: ColorImage,
    pub depth: DepthMap,
    pub mask: Mask,
}

#[derive(Debug, Clone)]
pub struct SupervisionSet {
    pub views: Vec<SupervisedView>,
}

impl SupervisionSet {
    pub fn new(views: Vec<SupervisedView>) -> Result<Self, TrainError> {
        if views.is_empty() {
            return Err(TrainError::Supervision("no views".into()));
        }
        for v in &views {
            let (w, h) = (v.camera.width, v.camera.height);
            if (v.color.width, v.color.height) != (w, h)
                || (v.depth.width, v.depth.height) != (w, h)
                || (v.mask.width(), v.mask.height()) != (w, h)
            {
                return Err(TrainError::Supervision(format!("{}: image sizes disagree with the camera", v.name)));
            }
            if v.depth.values.iter().any(|d| !d.is_finite() || *d < 0.0) {
                return Err(TrainError::Supervision(format!("{}: depth prior must be finite and >= 0", v.name)));
            }
        }
        Ok(Self { views })
    }

    /// Loads `<name>.inpaint.png` and `<name>.depth.pfm` from `priors` and
    /// `<name>.mask.png` from `masks` for every view of `model`.
    pub fn load(model: &SparseModel, priors: &Path, masks: &Path) -> Result<Self, TrainError> {
        let mut views = Vec::new();
        for id in model.view_order() {
            let img = &model.images()[id];
            let color = ColorImage::load_png(&priors.join(format!("{}.inpaint.png", img.name)))?;
            let depth = DepthMap::load_pfm(&priors.join(format!("{}.depth.pfm", img.name)))?;
            let mask = Mask::load_png(&masks.join(format!("{}.mask.png", img.name)))
                .map_err(|e| TrainError::Io(e.to_string()))?;
            views.push(SupervisedView {
                name: img.name.clone(),
                camera: model.camera_of(img).clone(),
                pose: img.pose,
                color,
                depth,
                mask,
            });
        }
        Self::new(views)
    }

    pub fn total_pixels(&self) -> usize {
        self.views.iter().map(|v| v.color.pixels.len()).sum()
    }
}

pub fn color_loss(rendered: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64, TrainError> {
    if rendered.len() != target.len() {
        return Err(TrainError::SizeMismatch(rendered.len(), target.len()));
    }
    Ok(rendered
        .iter()
        .zip(target)
        .map(|(c, t)| (0..3).map(|k| (t[k] - c[k]).powi(2)).sum::<f64>())
        .sum())
}

pub fn depth_loss(rendered: &[f64], target: &[f64], mode: DepthMode, mask_bits: &[bool]) -> Result<f64, TrainError> {
    if rendered.len() != target.len() {
        return Err(TrainError::SizeMismatch(rendered.len(), target.len()));
    }
    if mode == DepthMode::MaskedOnly && mask_bits.len() != rendered.len() {
        return Err(TrainError::SizeMismatch(rendered.len(), mask_bits.len()));
    }
    Ok(match mode {
        DepthMode::None => 0.0,
        DepthMode::All => rendered.iter().zip(target).map(|(d, t)| (t - d).powi(2)).sum(),
        DepthMode::MaskedOnly => rendered
            .iter()
            .zip(target)
            .zip(mask_bits)
            .filter(|(_, m)| **m)
            .map(|((d, t), _)| (t - d).powi(2))
            .sum(),
    })
}

/// Channel mean and population covariance.
pub fn channel_moments(patch: &[[f64; 3]]) -> ([f64; 3], [[f64; 3]; 3]) {
    let n = patch.len().max(1) as f64;
    let mut mu = [0.0; 3];
    for p in patch {
        for k in 0..3 {
            mu[k] += p[k] / n;
        }
    }
    let mut cov = [[0.0; 3]; 3];
    for p in patch {
        for a in 0..3 {
            for b in 0..3 {
                cov[a][b] += (p[a] - mu[a]) * (p[b] - mu[b]) / n;
            }
        }
    }
    (mu, cov)
}

/// Moment distance between two equally sized patches.
pub fn patch_distance(rendered: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64, TrainError> {
    if rendered.len() != target.len() {
        return Err(TrainError::SizeMismatch(rendered.len(), target.len()));
    }
    let (mp, cp) = channel_moments(rendered);
    let (mq, cq) = channel_moments(target);
    let mut d = 0.0;
    for a in 0..3 {
        d += (mp[a] - mq[a]).powi(2);
        for b in 0..3 {
            d += (cp[a][b] - cq[a][b]).powi(2);
        }
    }
    Ok(d)
}

/// Gradient of [`patch_distance`] with respect to every rendered pixel.
pub fn patch_distance_grad(rendered: &[[f64; 3]], target: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let n = rendered.len() as f64;
    let (mp, cp) = channel_moments(rendered);
    let (mq, cq) = channel_moments(target);
    rendered
        .iter()
        .map(|x| {
            let mut g = [0.0; 3];
            for c in 0..3 {
                g[c] = 2.0 * (mp[c] - mq[c]) / n;
                for b in 0..3 {
                    g[c] += 4.0 / n * (cp[c][b] - cq[c][b]) * (x[b] - mp[b]);
                }
            }
            g
        })
        .collect()
}

/// Mean patch distance over a batch of (rendered, target) patches.
pub fn perceptual_patch_loss(batch: &[(Vec<[f64; 3]>, Vec<[f64; 3]>)]) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (r, t) in batch {
        sum += patch_distance(r, t)?;
    }
    Ok(sum / batch.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSample {
    pub view: usize,
    /// Top-left pixel.
    pub u: u32,
    pub v: u32,
    pub size: u32,
}

impl PatchSample {
    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (0..self.size).flat_map(move |dy| (0..self.size).map(move |dx| (self.u + dx, self.v + dy)))
    }
}

/// `count` patches of side `size` whose centers are drawn uniformly from the
/// mask foreground; windows are shifted to stay inside the image.
pub fn sample_mask_patches(
    mask: &Mask,
    view: usize,
    size: u32,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<PatchSample>, TrainError> {
    if size > mask.width() || size > mask.height() {
        return Err(TrainError::Config(format!(
            "patch size {size} exceeds image {}x{}",
            mask.width(),
            mask.height()
        )));
    }
    let fg: Vec<(u32, u32)> = mask.foreground().collect();
    if fg.is_empty() {
        return Err(TrainError::EmptyMask);
    }
    Ok((0..count)
        .map(|_| {
            let (cx, cy) = fg[rng.gen_range(0..fg.len())];
            let half = size / 2;
            PatchSample {
                view,
                u: cx.saturating_sub(half).min(mask.width() - size),
                v: cy.saturating_sub(half).min(mask.height() - size),
                size,
            }
        })
        .collect())
}

pub fn total_loss(parts: (f64, f64, f64), cfg: &TrainConfig) -> f64 {
    cfg.color_weight * parts.0 + cfg.effective_depth_weight() * parts.1 + cfg.perceptual_weight * parts.2
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySample {
    pub view: usize,
    pub x: u32,
    pub y: u32,
}

#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub rays: Vec<RaySample>,
    pub patches: Vec<PatchSample>,
}

impl Batch {
    /// Every pixel of every view, no patches.
    pub fn full(sup: &SupervisionSet) -> Self {
        let rays = sup
            .views
            .iter()
            .enumerate()
            .flat_map(|(vi, v)| {
                (0..v.camera.height).flat_map(move |y| (0..v.camera.width).map(move |x| RaySample { view: vi, x, y }))
            })
            .collect();
        Self {
            rays,
            patches: Vec::new(),
        }
    }
}

/// Batch-mean loss terms. `total` is the optimized objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub color: f64,
    pub depth: f64,
    pub perceptual: f64,
    pub total: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        self.color.is_finite() && self.depth.is_finite() && self.perceptual.is_finite() && self.total.is_finite()
    }
}

fn pixel_ray(view: &SupervisedView, x: u32, y: u32, cfg: &TrainConfig) -> Ray {
    let dir = pixel_direction(&view.camera, &view.pose, x as f64, y as f64);
    Ray::new(view.pose.center(), dir, cfg.t_near, cfg.t_far).expect("validated interval")
}

fn stratification(jitter: Option<u64>, view: usize, pixel: u64) -> Stratification {
    match jitter {
        None => Stratification::Fixed,
        Some(seed) => Stratification::Jittered(ray_seed(seed, view as u64, pixel)),
    }
}

/// Loss of `batch` and its gradient, accumulated into `grad`. Color and
/// depth terms are averaged over the ray batch, the patch term over the
/// patch batch. `jitter` seeds stratified sampling; `None` uses fixed samples.
pub fn loss_and_grad(
    field: &VoxelField,
    sup: &SupervisionSet,
    cfg: &TrainConfig,
    batch: &Batch,
    jitter: Option<u64>,
    grad: &mut FieldGrad,
) -> LossParts {
    let n_rays = batch.rays.len().max(1) as f64;
    let depth_weight = cfg.effective_depth_weight();
    let mut color_sum = 0.0;
    let mut depth_sum = 0.0;
    for rs in &batch.rays {
        let view = &sup.views[rs.view];
        let ray = pixel_ray(view, rs.x, rs.y, cfg);
        let pixel = (rs.y * view.camera.width + rs.x) as u64;
        let r = render_ray(field, &ray, cfg.n_samples, stratification(jitter, rs.view, pixel));
        let target = view.color.get(rs.x, rs.y);
        let mut d_color = [0.0; 3];
        for k in 0..3 {
            let e = r.color[k] - target[k] as f64;
            color_sum += e * e;
            d_color[k] = cfg.color_weight * 2.0 * e / n_rays;
        }
        let supervised = match cfg.depth_mode {
            DepthMode::None => false,
            DepthMode::All => true,
            DepthMode::MaskedOnly => view.mask.get(rs.x, rs.y),
        };
        let mut d_depth = 0.0;
        if supervised {
            let e = r.depth - view.depth.get(rs.x, rs.y) as f64;
            depth_sum += e * e;
            d_depth = depth_weight * 2.0 * e / n_rays;
        }
        render_ray_backward(&r, d_color, d_depth, grad);
    }

    let mut perceptual = 0.0;
    if cfg.perceptual && !batch.patches.is_empty() {
        let n_patches = batch.patches.len() as f64;
        for patch in &batch.patches {
            let view = &sup.views[patch.view];
            let mut results = Vec::with_capacity((patch.size * patch.size) as usize);
            let mut rendered = Vec::with_capacity(results.capacity());
            let mut target = Vec::with_capacity(results.capacity());
            for (x, y) in patch.pixels() {
                let ray = pixel_ray(view, x, y, cfg);
                let pixel = (y * view.camera.width + x) as u64;
                let r = render_ray(field, &ray, cfg.n_samples, stratification(jitter, patch.view, pixel));
                rendered.push(r.color);
                target.push(view.color.get(x, y).map(|c| c as f64));
                results.push(r);
            }
            perceptual += patch_distance(&rendered, &target).expect("equal patch sizes") / n_patches;
            let scale = cfg.perceptual_weight / n_patches;
            for (r, g) in results.iter().zip(patch_distance_grad(&rendered, &target)) {
                render_ray_backward(r, g.map(|v| v * scale), 0.0, grad);
            }
        }
    }

    let color = color_sum / n_rays;
    let depth = depth_sum / n_rays;
    LossParts {
        color,
        depth,
        perceptual,
        total: total_loss((color, depth, perceptual), cfg),
    }
}

/// Adam with per-parameter first and second moments.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
    m: FieldGrad,
    v: FieldGrad,
}

impl Adam {
    pub fn new(field: &VoxelField, cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            step: 0,
            m: FieldGrad::zeros_like(field),
            v: FieldGrad::zeros_like(field),
        }
    }

    pub fn step(&mut self, field: &mut VoxelField, grad: &FieldGrad) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.epsilon);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            }
        };
        update(&mut field.density, &grad.density, &mut self.m.density, &mut self.v.density);
        update(&mut field.color, &grad.color, &mut self.m.color, &mut self.v.color);
    }
}

/// Draws the rays and patches for one step.
pub fn sample_batch(sup: &SupervisionSet, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Batch, TrainError> {
    let total = sup.total_pixels();
    let mut rays = Vec::with_capacity(cfg.ray_batch);
    for _ in 0..cfg.ray_batch {
        let mut k = rng.gen_range(0..total);
        let mut vi = 0;
        while k >= sup.views[vi].color.pixels.len() {
            k -= sup.views[vi].color.pixels.len();
            vi += 1;
        }
        let w = sup.views[vi].camera.width as usize;
        rays.push(RaySample {
            view: vi,
            x: (k % w) as u32,
            y: (k / w) as u32,
        });
    }
    let mut patches = Vec::new();
    if cfg.perceptual && cfg.perceptual_weight > 0.0 && cfg.patch_batch > 0 {
        let masked: Vec<usize> = (0..sup.views.len()).filter(|i| !sup.views[*i].mask.is_empty()).collect();
        if !masked.is_empty() {
            for _ in 0..cfg.patch_batch {
                let vi = masked[rng.gen_range(0..masked.len())];
                patches.extend(sample_mask_patches(&sup.views[vi].mask, vi, cfg.patch_size as u32, 1, rng)?);
            }
        }
    }
    Ok(Batch { rays, patches })
}

/// Field covering `bounds` with the configured grid.
pub fn init_field(cfg: &TrainConfig, bounds: [[f64; 3]; 2]) -> Result<VoxelField, TrainError> {
    let [lo, hi] = bounds;
    VoxelField::new(
        cfg.grid.resolution,
        crate::geometry::Vec3::from(lo),
        crate::geometry::Vec3::from(hi),
        cfg.grid.init_density,
        cfg.grid.init_color,
    )
    .map_err(|e| TrainError::Config(e.to_string()))
}

/// Axis-aligned bounds of the sparse points, padded by `pad` of the extent.
pub fn model_bounds(model: &SparseModel, pad: f64) -> Option<[[f64; 3]; 2]> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in model.points().values() {
        for a in 0..3 {
            lo[a] = lo[a].min(p.position[a]);
            hi[a] = hi[a].max(p.position[a]);
        }
    }
    if model.points().is_empty() {
        return None;
    }
    for a in 0..3 {
        let ext = (hi[a] - lo[a]).max(1e-3);
        lo[a] -= pad * ext;
        hi[a] += pad * ext;
    }
    Some([lo, hi])
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub field: VoxelField,
    pub history: Vec<LossParts>,
}

/// Runs `cfg.steps` optimizer steps and returns the trained field with its
/// per-step loss history.
pub fn train_removal(
    field: VoxelField,
    sup: &SupervisionSet,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, &LossParts),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut field = field;
    let mut adam = Adam::new(&field, cfg);
    let mut grad = FieldGrad::zeros_like(&field);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sample_batch(sup, cfg, &mut rng)?;
        grad.clear();
        let jitter = ray_seed(cfg.seed, 0x5EED, step as u64);
        let parts = loss_and_grad(&field, sup, cfg, &batch, Some(jitter), &mut grad);
        if !parts.is_finite() {
            log::error!("non-finite loss at step {step}: {parts:?}");
            return Err(TrainError::NonFinite { step, parts });
        }
        adam.step(&mut field, &grad);
        history.push(parts);
        on_step(step, &parts);
    }
    Ok(TrainOutcome { field, history })
}

pub fn write_loss_csv(history: &[LossParts], path: &Path) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| TrainError::Io(e.to_string()))?;
    w.write_record(["step", "L_c", "L_d", "L_p", "total"])
        .map_err(|e| TrainError::Io(e.to_string()))?;
    for (i, p) in history.iter().enumerate() {
        w.write_record([
            i.to_string(),
            p.color.to_string(),
            p.depth.to_string(),
            p.perceptual.to_string(),
            p.total.to_string(),
        ])
        .map_err(|e| TrainError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| TrainError::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn color_loss_examples() {
        assert_eq!(color_loss(&[[0.2, 0.3, 0.4]], &[[0.2, 0.3, 0.4]]).unwrap(), 0.0);
        assert_eq!(color_loss(&[[0.0; 3]], &[[1.0; 3]]).unwrap(), 3.0);
        assert!(matches!(color_loss(&[[0.0; 3]], &[]), Err(TrainError::SizeMismatch(1, 0))));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<[f64; 3]> = (0..50).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let b: Vec<[f64; 3]> = (0..50).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let mut oracle = 0.0;
        for i in 0..50 {
            for k in 0..3 {
                oracle += (a[i][k] - b[i][k]) * (a[i][k] - b[i][k]);
            }
        }
        assert!((color_loss(&a, &b).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn depth_loss_examples() {
        let (d, t) = ([1.0, 2.0], [1.0, 3.0]);
        assert_eq!(depth_loss(&d, &t, DepthMode::None, &[]).unwrap(), 0.0);
        assert_eq!(depth_loss(&d, &t, DepthMode::All, &[]).unwrap(), 1.0);
        assert_eq!(depth_loss(&d, &t, DepthMode::MaskedOnly, &[false, true]).unwrap(), 1.0);
        assert_eq!(depth_loss(&d, &t, DepthMode::MaskedOnly, &[true, false]).unwrap(), 0.0);
        assert!(depth_loss(&d, &t[..1], DepthMode::All, &[]).is_err());
    }

    fn random_patch(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()
    }

    #[test]
    fn patch_distance_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_patch(&mut rng, 64);
        assert_eq!(patch_distance(&p, &p).unwrap(), 0.0);
        let delta = [0.1, -0.2, 0.05];
        let q: Vec<[f64; 3]> = p.iter().map(|x| [x[0] + delta[0], x[1] + delta[1], x[2] + delta[2]]).collect();
        let expect: f64 = delta.iter().map(|d| d * d).sum();
        assert!((patch_distance(&p, &q).unwrap() - expect).abs() < 1e-12);
        assert!(patch_distance(&p, &q[..10]).is_err());
    }

    #[test]
    fn patch_distance_matches_brute_force_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let p = random_patch(&mut rng, 49);
            let q = random_patch(&mut rng, 49);
            // Moments via explicit per-channel vectors.
            let brute = |x: &[[f64; 3]]| {
                let n = x.len() as f64;
                let chans: Vec<Vec<f64>> = (0..3).map(|c| x.iter().map(|p| p[c]).collect()).collect();
                let mean: Vec<f64> = chans.iter().map(|c| c.iter().sum::<f64>() / n).collect();
                let mut cov = vec![vec![0.0; 3]; 3];
                for a in 0..3 {
                    for b in 0..3 {
                        let e_ab: f64 = chans[a].iter().zip(&chans[b]).map(|(u, v)| u * v).sum::<f64>() / n;
                        cov[a][b] = e_ab - mean[a] * mean[b];
                    }
                }
                (mean, cov)
            };
            let (mp, cp) = brute(&p);
            let (mq, cq) = brute(&q);
            let mut d = 0.0;
            for a in 0..3 {
                d += (mp[a] - mq[a]).powi(2);
                for b in 0..3 {
                    d += (cp[a][b] - cq[a][b]).powi(2);
                }
            }
            assert!((patch_distance(&p, &q).unwrap() - d).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_patch(&mut rng, 16);
        let q = random_patch(&mut rng, 16);
        let g = patch_distance_grad(&p, &q);
        let h = 1e-6;
        for i in 0..p.len() {
            for c in 0..3 {
                let mut up = p.clone();
                up[i][c] += h;
                let mut down = p.clone();
                down[i][c] -= h;
                let fd = (patch_distance(&up, &q).unwrap() - patch_distance(&down, &q).unwrap()) / (2.0 * h);
                assert!((fd - g[i][c]).abs() < 1e-8, "{fd} vs {}", g[i][c]);
            }
        }
    }

    #[test]
    fn patch_distance_ignores_pixel_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_patch(&mut rng, 36);
        let q = random_patch(&mut rng, 36);
        let mut shuffled = p.clone();
        shuffled.reverse();
        shuffled.swap(3, 17);
        let a = patch_distance(&p, &q).unwrap();
        let b = patch_distance(&shuffled, &q).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn perceptual_batch_is_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pairs: Vec<_> = (0..4).map(|_| (random_patch(&mut rng, 16), random_patch(&mut rng, 16))).collect();
        let mean = pairs.iter().map(|(a, b)| patch_distance(a, b).unwrap()).sum::<f64>() / 4.0;
        assert!((perceptual_patch_loss(&pairs).unwrap() - mean).abs() < 1e-15);
    }

    #[test]
    fn patch_sampling_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let full = Mask::full(16, 16);
        let p = sample_mask_patches(&full, 0, 16, 3, &mut rng).unwrap();
        assert!(p.iter().all(|s| s.u == 0 && s.v == 0 && s.size == 16));

        let single = Mask::from_rect(16, 16, 8, 8, 8, 8);
        let p = sample_mask_patches(&single, 0, 4, 5, &mut rng).unwrap();
        assert!(p.iter().all(|s| *s == p[0]));
        assert_eq!((p[0].u, p[0].v), (6, 6));

        let corner = Mask::from_rect(16, 16, 15, 15, 15, 15);
        let p = sample_mask_patches(&corner, 0, 8, 1, &mut rng).unwrap();
        assert_eq!((p[0].u, p[0].v), (8, 8));

        let a = sample_mask_patches(&Mask::from_rect(16, 16, 2, 3, 12, 9), 0, 4, 10, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_mask_patches(&Mask::from_rect(16, 16, 2, 3, 12, 9), 0, 4, 10, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);

        assert!(matches!(
            sample_mask_patches(&Mask::new(8, 8), 0, 4, 1, &mut rng),
            Err(TrainError::EmptyMask)
        ));
    }

    #[test]
    fn total_loss_examples() {
        let ones = TrainConfig {
            color_weight: 1.0,
            depth_weight: 1.0,
            perceptual_weight: 1.0,
            ..TrainConfig::default()
        };
        assert_eq!(total_loss((1.0, 2.0, 3.0), &ones), 6.0);
        let no_p = TrainConfig {
            perceptual_weight: 0.0,
            ..ones.clone()
        };
        assert_eq!(total_loss((1.0, 2.0, 3.0), &no_p), 3.0);
        let defaults = TrainConfig::default();
        assert!((total_loss((1.0, 1.0, 1.0), &defaults) - 1.11).abs() < 1e-12);
        let dir = TrainConfig {
            depth_mode: DepthMode::None,
            ..ones
        };
        assert_eq!(total_loss((1.0, 2.0, 3.0), &dir), 4.0);
    }

    #[test]
    fn depth_mode_names() {
        assert_eq!("da".parse::<DepthMode>().unwrap(), DepthMode::All);
        assert_eq!(serde_json::to_string(&DepthMode::MaskedOnly).unwrap(), "\"dp\"");
        assert!("x".parse::<DepthMode>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            patch_size: 3,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            depth_weight: f64::NAN,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
