//! Prompt-driven object extraction.
//!
//! A 2D mask from one view is lifted onto a voxel grid of soft confidences
//! `U ∈ [0,1]` by projected gradient descent on a projection loss, reusing
//! the frozen compositing weights of a trained radiance field. The lifted
//! grid is then rendered into every view to cut the object out.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::geometry::{self, Vec3};
use crate::nn::{ParamSet, Tensor};
use crate::radiance_field::{render_view_full, RayRender, RenderConfig, VolumeField};
use crate::raster::{Image, Mask};
use crate::scalar::Scalar;
use crate::scene_io::{Aabb, CameraModel, MultiViewDataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Prompt {
    Points { points: Vec<(usize, usize)>, label: String },
    Text(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegMask2D {
    pub mask: Mask,
    pub iou_score: f64,
    pub label: String,
}

/// Pluggable promptable segmenter.
pub trait PromptSegmenter<T: Scalar> {
    fn segment(&self, image: &Image<T>, points: &[(usize, usize)]) -> Result<Mask>;
}

/// Reference segmenter: 4-connected region growing from each prompt point,
/// admitting pixels within Euclidean colour distance `tau` of the seed.
#[derive(Clone, Copy, Debug)]
pub struct RegionGrowing {
    pub tau: f64,
}

impl Default for RegionGrowing {
    fn default() -> Self {
        Self { tau: 0.1 }
    }
}

impl<T: Scalar> PromptSegmenter<T> for RegionGrowing {
    fn segment(&self, image: &Image<T>, points: &[(usize, usize)]) -> Result<Mask> {
        let (w, h) = (image.width, image.height);
        let mut mask = Mask::empty(w, h);
        let px = |r: usize, c: usize| image.pixel(r, c).map(|v| v.f64());
        for &(r0, c0) in points {
            let seed = px(r0, c0);
            let mut queue = VecDeque::from([(r0, c0)]);
            mask.set(r0, c0, true);
            while let Some((r, c)) = queue.pop_front() {
                let mut visit = |rr: usize, cc: usize| {
                    if mask.get(rr, cc) {
                        return;
                    }
                    let p = px(rr, cc);
                    let d = (0..3).map(|k| (p[k] - seed[k]).powi(2)).sum::<f64>().sqrt();
                    if d <= self.tau {
                        mask.set(rr, cc, true);
                        queue.push_back((rr, cc));
                    }
                };
                if r > 0 {
                    visit(r - 1, c);
                }
                if r + 1 < h {
                    visit(r + 1, c);
                }
                if c > 0 {
                    visit(r, c - 1);
                }
                if c + 1 < w {
                    visit(r, c + 1);
                }
            }
        }
        Ok(mask)
    }
}

/// Text prompt to pixel table, loaded from TOML such as
/// `[points]\n"red sphere" = [32, 40]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointLookup {
    pub points: BTreeMap<String, (usize, usize)>,
}

impl PointLookup {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: Self = toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("bad lookup table: {e}")))?;
        Ok(Self { points: raw.points.into_iter().map(|(k, v)| (normalize_text(&k), v)).collect() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn insert(&mut self, text: &str, point: (usize, usize)) {
        self.points.insert(normalize_text(text), point);
    }
}

fn normalize_text(s: &str) -> String {
    s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

pub fn text_to_point(text: &str, lookup: &PointLookup) -> Result<(usize, usize)> {
    let key = normalize_text(text);
    if key.is_empty() {
        return Err(Error::invalid("empty text prompt"));
    }
    lookup.points.get(&key).copied().ok_or_else(|| Error::NotFound(format!("no point for prompt {text:?}")))
}

/// Runs `segmenter` on the prompt. The score is the IoU against
/// `ground_truth` when given, otherwise 1.
pub fn segment_with_prompt<T: Scalar, S: PromptSegmenter<T> + ?Sized>(
    image: &Image<T>,
    prompt: &Prompt,
    segmenter: &S,
    lookup: &PointLookup,
    ground_truth: Option<&Mask>,
) -> Result<SegMask2D> {
    let (points, label) = match prompt {
        Prompt::Points { points, label } => (points.clone(), label.clone()),
        Prompt::Text(t) => (vec![text_to_point(t, lookup)?], normalize_text(t)),
    };
    if points.is_empty() {
        return Err(Error::invalid("prompt has no points"));
    }
    if let Some(&(r, c)) = points.iter().find(|&&(r, c)| r >= image.height || c >= image.width) {
        return Err(Error::InvalidArgument(format!("prompt point ({r}, {c}) outside the image")));
    }
    let mask = segmenter.segment(image, &points)?;
    let iou_score = ground_truth.map(|g| mask.iou(g)).unwrap_or(1.0);
    Ok(SegMask2D { mask, iou_score, label })
}

/// Soft confidences on the vertices of a regular grid spanning `bounds`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskGrid {
    pub res: [usize; 3],
    pub bounds: Aabb,
    /// Indexed `(x·res_y + y)·res_z + z`.
    pub data: Vec<f64>,
}

impl MaskGrid {
    pub fn zeros(res: [usize; 3], bounds: Aabb) -> Result<Self> {
        if res.iter().any(|&r| r < 2) {
            return Err(Error::invalid("grid needs at least two vertices per axis"));
        }
        Ok(Self { res, bounds, data: vec![0.0; res[0] * res[1] * res[2]] })
    }

    pub fn filled(res: [usize; 3], bounds: Aabb, v: f64) -> Result<Self> {
        let mut g = Self::zeros(res, bounds)?;
        g.data.iter_mut().for_each(|x| *x = v);
        Ok(g)
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.res[1] + j) * self.res[2] + k
    }

    pub fn vertex(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let (lo, hi) = (self.bounds.lo, self.bounds.hi);
        let ijk = [i, j, k];
        std::array::from_fn(|a| lo[a] + (hi[a] - lo[a]) * ijk[a] as f64 / (self.res[a] - 1) as f64)
    }

    /// The eight trilinear `(index, weight)` pairs for `p`, clamped to the box.
    pub fn corners(&self, p: Vec3) -> [(usize, f64); 8] {
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let (lo, hi) = (self.bounds.lo[a], self.bounds.hi[a]);
            let u = ((p[a] - lo) / (hi - lo)).clamp(0.0, 1.0) * (self.res[a] - 1) as f64;
            let b = (u.floor() as usize).min(self.res[a] - 2);
            base[a] = b;
            frac[a] = u - b as f64;
        }
        std::array::from_fn(|n| {
            let (dx, dy, dz) = (n >> 2 & 1, n >> 1 & 1, n & 1);
            let w = [dx, dy, dz].iter().enumerate().map(|(a, &d)| if d == 1 { frac[a] } else { 1.0 - frac[a] }).product();
            (self.index(base[0] + dx, base[1] + dy, base[2] + dz), w)
        })
    }

    pub fn sample(&self, p: Vec3) -> f64 {
        self.corners(p).iter().map(|&(i, w)| w * self.data[i]).sum()
    }

    fn arch(&self) -> serde_json::Value {
        serde_json::json!({ "res": self.res, "lo": self.bounds.lo, "hi": self.bounds.hi })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut p = ParamSet::<f64>::new();
        p.add("U", Tensor::new(self.res.to_vec(), self.data.clone()));
        checkpoint::save(path, MASK_GRID_KIND, &self.arch(), &p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let header = checkpoint::read_header(path)?;
        let bad = |m: &str| Error::format(path, m.to_string());
        let res: [usize; 3] = serde_json::from_value(header.arch["res"].clone()).map_err(|_| bad("missing res"))?;
        let lo: Vec3 = serde_json::from_value(header.arch["lo"].clone()).map_err(|_| bad("missing lo"))?;
        let hi: Vec3 = serde_json::from_value(header.arch["hi"].clone()).map_err(|_| bad("missing hi"))?;
        let mut grid = Self::zeros(res, Aabb { lo, hi }).map_err(|e| bad(&e.to_string()))?;
        let params = checkpoint::load::<f64>(path, MASK_GRID_KIND, &grid.arch())?;
        let t = params.get(0);
        if params.len() != 1 || t.shape != res.to_vec() {
            return Err(bad("grid tensor does not match its header"));
        }
        grid.data.clone_from(&t.data);
        Ok(grid)
    }
}

pub const MASK_GRID_KIND: &str = "mask_grid";

/// `Σ_i w_i · U(p_i)` along one rendered ray.
pub fn render_mask_confidence<T: Scalar>(grid: &MaskGrid, weights: &[T], points: &[Vec3]) -> f64 {
    weights.iter().zip(points).map(|(w, &p)| w.f64() * grid.sample(p)).sum()
}

/// Splits every sample into `sub` equally weighted points spread across its
/// depth bin (bins are inferred from the spacing of consecutive samples).
/// Calls `f(point, weight)` for each piece; `sub = 1` leaves samples as is.
fn for_each_binned<T: Scalar>(weights: &[T], points: &[Vec3], sub: usize, mut f: impl FnMut(Vec3, f64)) {
    let n = points.len();
    let sub = sub.max(1);
    for i in 0..n {
        let w = weights[i].f64();
        if sub == 1 || n < 2 {
            f(points[i], w);
            continue;
        }
        let (a, b) = if i + 1 < n { (points[i], points[i + 1]) } else { (points[i - 1], points[i]) };
        let step = geometry::sub(b, a);
        for k in 0..sub {
            let off = (k as f64 + 0.5) / sub as f64 - 0.5;
            f(geometry::add(points[i], geometry::scale(step, off)), w / sub as f64);
        }
    }
}

/// [`render_mask_confidence`] with each sample spread over `sub` points of its bin.
pub fn render_mask_confidence_binned<T: Scalar>(grid: &MaskGrid, weights: &[T], points: &[Vec3], sub: usize) -> f64 {
    let mut m = 0.0;
    for_each_binned(weights, points, sub, |p, w| m += w * grid.sample(p));
    m
}

/// `−Σ m_sam·m_3d + λ Σ (1 − m_sam)·m_3d`.
pub fn mask_projection_loss(m_sam: &[bool], m_3d: &[f64], lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("λ must be nonnegative, got {lambda}")));
    }
    if m_sam.len() != m_3d.len() {
        return Err(Error::invalid("mask and confidence lengths differ"));
    }
    Ok(m_sam.iter().zip(m_3d).map(|(&s, &m)| if s { -m } else { lambda * m }).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftConfig {
    pub res: usize,
    pub iters: usize,
    pub lambda: f64,
    pub lr: f64,
    pub rays_per_iter: usize,
    /// Points per sample bin when splatting weights onto the grid.
    pub subsamples: usize,
    /// Binarization threshold on rendered confidences.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for LiftConfig {
    fn default() -> Self {
        Self { res: 64, iters: 200, lambda: 0.05, lr: 0.5, rays_per_iter: 1024, subsamples: 4, threshold: 0.5, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LiftReport {
    /// Projection loss over every ray of the view, after each iteration.
    pub losses: Vec<f64>,
}

// Samples whose weight falls below this contribute nothing measurable.
const WEIGHT_FLOOR: f64 = 1e-6;

/// Sparse linear map from grid values to per-ray confidences.
struct RayOperator {
    offsets: Vec<usize>,
    entries: Vec<(u32, f32)>,
}

impl RayOperator {
    fn build<T: Scalar>(grid: &MaskGrid, rays: &[RayRender<T>], sub: usize) -> Self {
        let mut offsets = Vec::with_capacity(rays.len() + 1);
        let mut entries = Vec::new();
        offsets.push(0);
        for r in rays {
            for_each_binned(&r.weights, &r.points, sub, |p, w| {
                if w < WEIGHT_FLOOR {
                    return;
                }
                for (i, t) in grid.corners(p) {
                    if t > 0.0 {
                        entries.push((i as u32, (w * t) as f32));
                    }
                }
            });
            offsets.push(entries.len());
        }
        Self { offsets, entries }
    }

    fn row(&self, r: usize) -> &[(u32, f32)] {
        &self.entries[self.offsets[r]..self.offsets[r + 1]]
    }

    fn apply(&self, r: usize, u: &[f64]) -> f64 {
        self.row(r).iter().map(|&(i, a)| a as f64 * u[i as usize]).sum()
    }
}

/// Lifts one view's 2D mask onto a zero-initialized grid over `bounds`.
///
/// The loss is linear in `U`, so its gradient is the transposed ray
/// operator applied to the per-ray coefficients (−1 inside the mask, λ
/// outside). Each iteration steps along the gradient of a random ray subset
/// and clamps back to `[0, 1]`.
pub fn lift_mask_to_3d<T: Scalar, F: VolumeField<T> + ?Sized>(
    field: &F,
    camera: &CameraModel,
    segmask: &SegMask2D,
    bounds: Aabb,
    render: &RenderConfig,
    cfg: &LiftConfig,
) -> Result<(MaskGrid, LiftReport)> {
    if !(cfg.lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("λ must be nonnegative, got {}", cfg.lambda)));
    }
    if segmask.mask.width != camera.width || segmask.mask.height != camera.height {
        return Err(Error::invalid("mask does not match the camera"));
    }
    let mut grid = MaskGrid::zeros([cfg.res; 3], bounds)?;
    let mut report = LiftReport::default();
    if cfg.iters == 0 {
        return Ok((grid, report));
    }
    let rendered = render_view_full(field, camera, render)?;
    let op = RayOperator::build(&grid, &rendered.rays, cfg.subsamples);
    let m_sam = &segmask.mask.data;
    let n_rays = m_sam.len();
    let batch = cfg.rays_per_iter.clamp(1, n_rays);
    let coef = |r: usize| if m_sam[r] { -1.0 } else { cfg.lambda };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut grad = vec![0.0; grid.data.len()];
    let mut touched: Vec<usize> = Vec::new();
    for iter in 0..cfg.iters {
        for r in sample(&mut rng, n_rays, batch) {
            let c = coef(r);
            for &(i, a) in op.row(r) {
                let i = i as usize;
                if grad[i] == 0.0 {
                    touched.push(i);
                }
                grad[i] += c * a as f64;
            }
        }
        for &i in &touched {
            grid.data[i] = (grid.data[i] - cfg.lr * grad[i]).clamp(0.0, 1.0);
            grad[i] = 0.0;
        }
        touched.clear();
        let m3d: Vec<f64> = (0..n_rays).map(|r| op.apply(r, &grid.data)).collect();
        let loss = mask_projection_loss(m_sam, &m3d, cfg.lambda)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch: iter, msg: "projection loss is not finite".into() });
        }
        report.losses.push(loss);
    }
    Ok((grid, report))
}

/// Binary object mask of one view: confidence rendered from the grid, thresholded.
pub fn render_object_mask<T: Scalar, F: VolumeField<T> + ?Sized>(
    field: &F,
    grid: &MaskGrid,
    camera: &CameraModel,
    render: &RenderConfig,
    cfg: &LiftConfig,
) -> Result<Mask> {
    let rendered = render_view_full(field, camera, render)?;
    Ok(Mask {
        width: camera.width,
        height: camera.height,
        data: rendered
            .rays
            .iter()
            .map(|r| render_mask_confidence_binned(grid, &r.weights, &r.points, cfg.subsamples) >= cfg.threshold)
            .collect(),
    })
}

/// Masks every dataset view with the lifted object; unmasked pixels become black.
pub fn extract_object_views<T: Scalar, F: VolumeField<T> + ?Sized>(
    dataset: &MultiViewDataset<T>,
    field: &F,
    grid: &MaskGrid,
    render: &RenderConfig,
    cfg: &LiftConfig,
) -> Result<Vec<(Image<T>, Mask)>> {
    dataset
        .views
        .iter()
        .map(|v| {
            let mask = render_object_mask(field, grid, &v.camera, render, cfg)?;
            Ok((v.image.masked(&mask), mask))
        })
        .collect()
}
