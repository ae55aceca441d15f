//! Lambertian voxel radiance field with differentiable volume rendering.
//!
//! Density and color live on grid vertices as pre-activation values and are
//! trilinearly interpolated, then passed through softplus (density) and
//! sigmoid (color). Rays are quadratured at `n` samples:
//!
//! ```text
//! alpha_i = 1 - exp(-sigma_i * delta_i)
//! T_i     = prod_{j<i} (1 - alpha_j)
//! C       = sum_i T_i alpha_i c_i
//! D       = sum_i T_i alpha_i t_i
//! ```
//!
//! with `delta_i = t_{i+1} - t_i` and `t_n = t_far`. Light left over at
//! `t_far` composites over black.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{pixel_direction, CameraIntrinsics, Pose, Ray, Vec3};
use crate::raster::{ColorImage, DepthMap};

const MAGIC: &[u8; 4] = b"ORNF";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("grid resolution must be at least 2 per axis, got {0:?}")]
    Resolution([usize; 3]),
    #[error("bounds min must be below max on every axis")]
    Bounds,
    #[error("non-finite field parameter")]
    NonFinite,
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of softplus for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Inverse of sigmoid for `y` in `(0, 1)`.
pub fn logit(y: f64) -> f64 {
    (y / (1.0 - y)).ln()
}

/// Eight corner vertices and weights of a trilinear lookup.
#[derive(Debug, Clone, Copy)]
pub struct Trilinear {
    pub index: [usize; 8],
    pub weight: [f64; 8],
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelField {
    resolution: [usize; 3],
    min: Vec3,
    max: Vec3,
    /// Pre-activation density, one per vertex, x fastest.
    pub density: Vec<f64>,
    /// Pre-activation color, three per vertex.
    pub color: Vec<f64>,
}

/// Gradient buffer shaped like a field's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrad {
    pub density: Vec<f64>,
    pub color: Vec<f64>,
}

impl FieldGrad {
    pub fn zeros_like(field: &VoxelField) -> Self {
        Self {
            density: vec![0.0; field.density.len()],
            color: vec![0.0; field.color.len()],
        }
    }

    pub fn clear(&mut self) {
        self.density.iter_mut().for_each(|g| *g = 0.0);
        self.color.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn add_scaled(&mut self, other: &FieldGrad, scale: f64) {
        for (a, b) in self.density.iter_mut().zip(&other.density) {
            *a += scale * b;
        }
        for (a, b) in self.color.iter_mut().zip(&other.color) {
            *a += scale * b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.density
            .iter()
            .chain(&self.color)
            .fold(0.0f64, |m, g| m.max(g.abs()))
    }
}

impl VoxelField {
    /// Uniform field with the given pre-activation density and color.
    pub fn new(
        resolution: [usize; 3],
        min: Vec3,
        max: Vec3,
        density_pre: f64,
        color_pre: f64,
    ) -> Result<Self, FieldError> {
        if resolution.iter().any(|&n| n < 2) {
            return Err(FieldError::Resolution(resolution));
        }
        if (0..3).any(|k| !(min[k] < max[k])) {
            return Err(FieldError::Bounds);
        }
        let n = resolution.iter().product::<usize>();
        Ok(Self {
            resolution,
            min,
            max,
            density: vec![density_pre; n],
            color: vec![color_pre; 3 * n],
        })
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        (self.min, self.max)
    }

    pub fn num_vertices(&self) -> usize {
        self.density.len()
    }

    pub fn vertex_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.resolution[0] * (j + self.resolution[1] * k)
    }

    pub fn vertex_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let ijk = [i, j, k];
        Vec3::from_fn(|a, _| {
            self.min[a] + (self.max[a] - self.min[a]) * ijk[a] as f64 / (self.resolution[a] - 1) as f64
        })
    }

    pub fn is_finite(&self) -> bool {
        self.density.iter().chain(&self.color).all(|v| v.is_finite())
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Corner indices and weights for `p`, or `None` outside the bounds.
    pub fn trilinear(&self, p: &Vec3) -> Option<Trilinear> {
        if !self.contains(p) {
            return None;
        }
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let n = self.resolution[a];
            let g = (p[a] - self.min[a]) / (self.max[a] - self.min[a]) * (n - 1) as f64;
            let i = (g.floor() as usize).min(n - 2);
            base[a] = i;
            frac[a] = g - i as f64;
        }
        let mut index = [0; 8];
        let mut weight = [0.0; 8];
        for c in 0..8 {
            let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            index[c] = self.vertex_index(base[0] + dx, base[1] + dy, base[2] + dz);
            let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            weight[c] = wx * wy * wz;
        }
        Some(Trilinear { index, weight })
    }

    fn interpolate(&self, tl: &Trilinear) -> (f64, [f64; 3]) {
        let mut s = 0.0;
        let mut q = [0.0; 3];
        for c in 0..8 {
            let (v, w) = (tl.index[c], tl.weight[c]);
            s += w * self.density[v];
            for ch in 0..3 {
                q[ch] += w * self.color[3 * v + ch];
            }
        }
        (s, q)
    }

    /// Activated density and color at `p`; zero density and black outside.
    pub fn sample(&self, p: &Vec3) -> (f64, [f64; 3]) {
        match self.trilinear(p) {
            None => (0.0, [0.0; 3]),
            Some(tl) => {
                let (s, q) = self.interpolate(&tl);
                (softplus(s), q.map(sigmoid))
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), FieldError> {
        let io = |source| FieldError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut buf = Vec::with_capacity(64 + 16 * self.density.len());
        buf.write_all(MAGIC).map_err(io)?;
        buf.write_u32::<LittleEndian>(VERSION).map_err(io)?;
        for n in self.resolution {
            buf.write_u32::<LittleEndian>(n as u32).map_err(io)?;
        }
        for v in self.min.iter().chain(self.max.iter()) {
            buf.write_f64::<LittleEndian>(*v).map_err(io)?;
        }
        for v in self.density.iter().chain(&self.color) {
            buf.write_f32::<LittleEndian>(*v as f32).map_err(io)?;
        }
        std::fs::write(path, buf).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, FieldError> {
        let name = path.display().to_string();
        let bad = |reason: &str| FieldError::Checkpoint {
            path: name.clone(),
            reason: reason.to_string(),
        };
        let bytes = std::fs::read(path).map_err(|source| FieldError::Io {
            path: name.clone(),
            source,
        })?;
        let mut r = std::io::Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut res = [0usize; 3];
        for n in &mut res {
            *n = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
        }
        let mut b = [0.0f64; 6];
        for v in &mut b {
            *v = r.read_f64::<LittleEndian>().map_err(|_| bad("truncated header"))?;
        }
        let mut field = VoxelField::new(res, Vec3::new(b[0], b[1], b[2]), Vec3::new(b[3], b[4], b[5]), 0.0, 0.0)?;
        for v in field.density.iter_mut().chain(field.color.iter_mut()) {
            *v = r.read_f32::<LittleEndian>().map_err(|_| bad("truncated grid data"))? as f64;
        }
        if !field.is_finite() {
            return Err(FieldError::NonFinite);
        }
        Ok(field)
    }
}

/// Sample placement along a ray.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stratification {
    /// Samples at the left edge of each of `n` equal bins.
    Fixed,
    /// One uniform sample per bin, seeded.
    Jittered(u64),
}

/// Mixes a global seed with a ray identifier (SplitMix64 finalizer).
pub fn ray_seed(global: u64, view: u64, pixel: u64) -> u64 {
    let mut z = global ^ view.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ pixel.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_positions(ray: &Ray, n: usize, strat: Stratification) -> Vec<f64> {
    let width = (ray.t_far - ray.t_near) / n as f64;
    match strat {
        Stratification::Fixed => (0..n).map(|i| ray.t_near + i as f64 * width).collect(),
        Stratification::Jittered(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n)
                .map(|i| ray.t_near + (i as f64 + rng.gen::<f64>()) * width)
                .collect()
        }
    }
}

#[derive(Debug, Clone)]
struct SampleRecord {
    t: f64,
    delta: f64,
    alpha: f64,
    /// Transmittance before this sample.
    trans: f64,
    rgb: [f64; 3],
    /// `d sigma / d s` at the interpolated pre-activation.
    dsigma: f64,
    corners: Trilinear,
}

#[derive(Debug, Clone)]
pub struct RenderResult {
    pub color: [f64; 3],
    pub depth: f64,
    /// Transmittance left at `t_far`.
    pub residual: f64,
    /// Sum of compositing weights.
    pub weight_sum: f64,
    records: Vec<SampleRecord>,
}

pub fn render_ray(field: &VoxelField, ray: &Ray, n_samples: usize, strat: Stratification) -> RenderResult {
    assert!(n_samples >= 2, "need at least two samples per ray");
    let ts = sample_positions(ray, n_samples, strat);
    let mut trans = 1.0;
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut weight_sum = 0.0;
    let mut records = Vec::new();
    for (i, &t) in ts.iter().enumerate() {
        let next = ts.get(i + 1).copied().unwrap_or(ray.t_far);
        let delta = next - t;
        let Some(corners) = field.trilinear(&ray.at(t)) else {
            continue;
        };
        let (s, q) = field.interpolate(&corners);
        let sigma = softplus(s);
        let alpha = -(-sigma * delta).exp_m1();
        let rgb = q.map(sigmoid);
        let w = trans * alpha;
        for ch in 0..3 {
            color[ch] += w * rgb[ch];
        }
        depth += w * t;
        weight_sum += w;
        records.push(SampleRecord {
            t,
            delta,
            alpha,
            trans,
            rgb,
            dsigma: sigmoid(s),
            corners,
        });
        trans *= 1.0 - alpha;
    }
    RenderResult {
        color,
        depth,
        residual: trans,
        weight_sum,
        records,
    }
}

/// Accumulates into `grad` the gradient of `d_color . C + d_depth * D`
/// with respect to the field's pre-activation parameters.
pub fn render_ray_backward(result: &RenderResult, d_color: [f64; 3], d_depth: f64, grad: &mut FieldGrad) {
    if d_color == [0.0; 3] && d_depth == 0.0 {
        return;
    }
    // Suffix sum of w_j * v_j over samples after the current one.
    let mut suffix = 0.0;
    for rec in result.records.iter().rev() {
        let w = rec.trans * rec.alpha;
        let v = d_color[0] * rec.rgb[0] + d_color[1] * rec.rgb[1] + d_color[2] * rec.rgb[2] + d_depth * rec.t;
        let trans_after = rec.trans * (1.0 - rec.alpha);
        let g_sigma = rec.delta * (trans_after * v - suffix);
        suffix += w * v;

        let g_s = g_sigma * rec.dsigma;
        let g_q = [0, 1, 2].map(|ch| w * d_color[ch] * rec.rgb[ch] * (1.0 - rec.rgb[ch]));
        for c in 0..8 {
            let (vi, cw) = (rec.corners.index[c], rec.corners.weight[c]);
            grad.density[vi] += cw * g_s;
            for ch in 0..3 {
                grad.color[3 * vi + ch] += cw * g_q[ch];
            }
        }
    }
}

pub struct RenderedView {
    pub color: ColorImage,
    pub depth: DepthMap,
}

/// Renders every pixel center; jittered sampling derives a per-pixel seed
/// from `seed` so renders are reproducible.
pub fn render_image(
    field: &VoxelField,
    cam: &CameraIntrinsics,
    pose: &Pose,
    n_samples: usize,
    t_near: f64,
    t_far: f64,
    seed: Option<u64>,
) -> RenderedView {
    let mut color = ColorImage::new(cam.width, cam.height);
    let mut depth = DepthMap::new(cam.width, cam.height);
    let origin = pose.center();
    for y in 0..cam.height {
        for x in 0..cam.width {
            let dir = pixel_direction(cam, pose, x as f64, y as f64);
            let ray = Ray::new(origin, dir, t_near, t_far).expect("valid ray interval");
            let strat = match seed {
                None => Stratification::Fixed,
                Some(s) => Stratification::Jittered(ray_seed(s, 0, (y * cam.width + x) as u64)),
            };
            let r = render_ray(field, &ray, n_samples, strat);
            color.set(x, y, r.color.map(|c| c as f32));
            depth.set(x, y, r.depth as f32);
        }
    }
    RenderedView { color, depth }
}
