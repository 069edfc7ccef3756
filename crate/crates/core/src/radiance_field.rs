//! Small neural radiance field: ray casting, volume rendering and
//! photometric fitting.
//!
//! The network maps a positionally encoded point to a density (softplus)
//! and, together with the encoded view direction, to a colour (sigmoid).
//! Rendering alpha-composites samples front to back over `[t_n, t_f]` and
//! fills the residual transmittance with a background colour.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::geometry::{self, Vec3};
use crate::nn::{composite_ray, Adam, Linear, ParamSet, Tape, Tensor, Var};
use crate::raster::Image;
use crate::scalar::Scalar;
use crate::scene_io::{CameraModel, MultiViewDataset, Split};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, dir: Vec3, near: f64, far: f64) -> Result<Self> {
        if ((geometry::norm(dir)) - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("ray direction must be unit length"));
        }
        if !(0.0 <= near && near < far) {
            return Err(Error::InvalidArgument(format!("need 0 ≤ near < far, got [{near}, {far}]")));
        }
        Ok(Self { origin, dir, near, far })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        geometry::add(self.origin, geometry::scale(self.dir, t))
    }
}

/// Ray through the centre of pixel `(row, col)`, with unbounded extent.
pub fn cast_ray(camera: &CameraModel, row: usize, col: usize) -> Result<Ray> {
    let dir = camera.pixel_direction(row, col)?;
    Ok(Ray { origin: camera.position(), dir, near: 0.0, far: f64::INFINITY })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub samples: usize,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
    /// Jitter each sample uniformly inside its bin (training only).
    pub stratified: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { samples: 48, near: 2.2, far: 5.8, background: [0.8; 3], stratified: false }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::invalid("need at least two samples per ray"));
        }
        if !(0.0 <= self.near && self.near < self.far && self.far.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad ray bounds [{}, {}]", self.near, self.far)));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        (self.far - self.near) / self.samples as f64
    }

    /// Sample distances along a ray; midpoints of equal bins unless jittered.
    pub fn sample_ts(&self, rng: Option<&mut ChaCha8Rng>) -> Vec<f64> {
        let step = self.step();
        match (self.stratified, rng) {
            (true, Some(rng)) => (0..self.samples).map(|i| self.near + (i as f64 + rng.gen::<f64>()) * step).collect(),
            _ => (0..self.samples).map(|i| self.near + (i as f64 + 0.5) * step).collect(),
        }
    }
}

/// Anything that can report density and colour at points seen from directions.
pub trait VolumeField<T: Scalar> {
    /// Returns `(density, rgb)` with one density and three colours per point.
    fn query(&self, points: &[Vec3], dirs: &[Vec3]) -> Result<(Vec<T>, Vec<T>)>;
}

/// Homogeneous medium, handy as a closed-form reference.
#[derive(Clone, Copy, Debug)]
pub struct ConstantField {
    pub density: f64,
    pub color: [f64; 3],
}

impl<T: Scalar> VolumeField<T> for ConstantField {
    fn query(&self, points: &[Vec3], _dirs: &[Vec3]) -> Result<(Vec<T>, Vec<T>)> {
        let n = points.len();
        let rgb = (0..n).flat_map(|_| self.color.map(T::of)).collect();
        Ok((vec![T::of(self.density); n], rgb))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RayRender<T> {
    pub color: [T; 3],
    pub weights: Vec<T>,
    pub points: Vec<Vec3>,
}

/// Renders one ray, honouring `ray.near/far` when they are tighter than `cfg`.
pub fn render_ray<T: Scalar, F: VolumeField<T> + ?Sized>(field: &F, ray: &Ray, cfg: &RenderConfig) -> Result<RayRender<T>> {
    let mut out = render_rays(field, std::slice::from_ref(ray), cfg, None)?;
    Ok(out.pop().expect("one ray"))
}

fn ray_span(ray: &Ray, cfg: &RenderConfig) -> RenderConfig {
    let mut c = cfg.clone();
    c.near = cfg.near.max(ray.near);
    c.far = cfg.far.min(ray.far);
    c
}

/// Batched [`render_ray`]; `rng` enables stratified jitter when configured.
pub fn render_rays<T: Scalar, F: VolumeField<T> + ?Sized>(
    field: &F,
    rays: &[Ray],
    cfg: &RenderConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<RayRender<T>>> {
    cfg.validate()?;
    let p = cfg.samples;
    let mut points = Vec::with_capacity(rays.len() * p);
    let mut dirs = Vec::with_capacity(rays.len() * p);
    let mut deltas = Vec::with_capacity(rays.len() * p);
    for ray in rays {
        let span = ray_span(ray, cfg);
        span.validate()?;
        let ts = span.sample_ts(rng.as_deref_mut());
        for &t in &ts {
            points.push(ray.at(t));
            dirs.push(ray.dir);
            deltas.push(T::of(span.step()));
        }
    }
    let (dens, rgb) = field.query(&points, &dirs)?;
    if let Some(i) = dens.iter().position(|v| !v.is_finite()).or_else(|| rgb.iter().position(|v| !v.is_finite()).map(|i| i / 3)) {
        return Err(Error::Numeric(format!("non-finite field output at sample {}", i % p)));
    }
    let bg = cfg.background.map(T::of);
    Ok(rays
        .iter()
        .enumerate()
        .map(|(r, _)| {
            let s = r * p..(r + 1) * p;
            let (color, weights, _) = composite_ray(&dens[s.clone()], &rgb[3 * s.start..3 * s.end], &deltas[s.clone()], bg);
            RayRender { color: color.map(|c| c.max(T::zero()).min(T::one())), weights, points: points[s].to_vec() }
        })
        .collect())
}

/// Mean squared error over all rays and channels.
pub fn photometric_loss<T: Scalar>(pred: &[T], truth: &[T]) -> Result<T> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::InvalidArgument(format!("shape mismatch: {} vs {}", pred.len(), truth.len())));
    }
    let s: T = pred.iter().zip(truth).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(s / T::of(pred.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldArch {
    pub hidden_layers: usize,
    pub width: usize,
    pub pos_freqs: usize,
    pub dir_freqs: usize,
    pub color_width: usize,
    /// Half-extent of the region the encoding is normalized to.
    pub bound: f64,
}

impl Default for FieldArch {
    fn default() -> Self {
        Self { hidden_layers: 4, width: 64, pos_freqs: 6, dir_freqs: 2, color_width: 32, bound: 1.0 }
    }
}

impl FieldArch {
    pub fn pos_dim(&self) -> usize {
        3 + 6 * self.pos_freqs
    }

    pub fn dir_dim(&self) -> usize {
        3 + 6 * self.dir_freqs
    }

    fn to_json(self) -> serde_json::Value {
        serde_json::to_value(self).expect("serializable arch")
    }
}

fn encode_into<T: Scalar>(v: Vec3, scale: f64, freqs: usize, out: &mut Vec<T>) {
    let v = v.map(|x| x / scale);
    out.extend(v.iter().map(|&x| T::of(x)));
    for k in 0..freqs {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        for x in v {
            let (s, c) = (f * x).sin_cos();
            out.push(T::of(s));
            out.push(T::of(c));
        }
    }
}

#[derive(Clone, Debug)]
pub struct RadianceField<T> {
    pub arch: FieldArch,
    pub params: ParamSet<T>,
    trunk: Vec<Linear>,
    density: Linear,
    color_hidden: Linear,
    color_out: Linear,
}

pub const FIELD_KIND: &str = "radiance_field";

impl<T: Scalar> RadianceField<T> {
    pub fn new(arch: FieldArch, seed: u64) -> Result<Self> {
        if arch.hidden_layers == 0 || arch.width == 0 || arch.color_width == 0 || !(arch.bound > 0.0) {
            return Err(Error::invalid("degenerate field architecture"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut trunk = Vec::with_capacity(arch.hidden_layers);
        let mut fan_in = arch.pos_dim();
        for i in 0..arch.hidden_layers {
            trunk.push(Linear::new(&mut params, &format!("trunk{i}"), fan_in, arch.width, &mut rng));
            fan_in = arch.width;
        }
        let density = Linear::new(&mut params, "density", arch.width, 1, &mut rng);
        let color_hidden = Linear::new(&mut params, "color0", arch.width + arch.dir_dim(), arch.color_width, &mut rng);
        let color_out = Linear::new(&mut params, "color1", arch.color_width, 3, &mut rng);
        Ok(Self { arch, params, trunk, density, color_hidden, color_out })
    }

    /// A field with zero density everywhere (final density bias pushed to −∞).
    pub fn empty(arch: FieldArch) -> Result<Self> {
        let mut f = Self::new(arch, 0)?;
        f.params.get_mut(f.density.w).data.iter_mut().for_each(|v| *v = T::zero());
        f.params.get_mut(f.density.b).data[0] = T::of(-1e4);
        Ok(f)
    }

    fn encode(&self, points: &[Vec3], dirs: &[Vec3]) -> (Tensor<T>, Tensor<T>) {
        let (pd, dd) = (self.arch.pos_dim(), self.arch.dir_dim());
        let mut pe = Vec::with_capacity(points.len() * pd);
        let mut de = Vec::with_capacity(points.len() * dd);
        for (p, d) in points.iter().zip(dirs) {
            encode_into(*p, self.arch.bound, self.arch.pos_freqs, &mut pe);
            encode_into(*d, 1.0, self.arch.dir_freqs, &mut de);
        }
        (Tensor::new(vec![points.len(), pd], pe), Tensor::new(vec![points.len(), dd], de))
    }

    /// Records the network on `tape`; returns `(density N×1, rgb N×3)`.
    pub fn forward(&self, tape: &mut Tape<T>, p: &[Var], points: &[Vec3], dirs: &[Vec3]) -> (Var, Var) {
        let (pe, de) = self.encode(points, dirs);
        let mut h = tape.leaf(pe);
        for layer in &self.trunk {
            let z = layer.forward(tape, p, h);
            h = tape.relu(z);
        }
        let raw_density = self.density.forward(tape, p, h);
        let density = tape.softplus(raw_density);
        let de = tape.leaf(de);
        let joined = tape.concat_cols(&[h, de]);
        let c = self.color_hidden.forward(tape, p, joined);
        let c = tape.relu(c);
        let c = self.color_out.forward(tape, p, c);
        let rgb = tape.sigmoid(c);
        (density, rgb)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, FIELD_KIND, &self.arch.to_json(), &self.params)
    }

    pub fn load(path: &Path, arch: FieldArch) -> Result<Self> {
        let loaded = checkpoint::load::<T>(path, FIELD_KIND, &arch.to_json())?;
        let mut f = Self::new(arch, 0)?;
        checkpoint::adopt(path, &mut f.params, loaded)?;
        Ok(f)
    }

    /// Reads the architecture from the checkpoint header, then loads.
    pub fn load_any(path: &Path) -> Result<Self> {
        let header = checkpoint::read_header(path)?;
        let arch: FieldArch = serde_json::from_value(header.arch)
            .map_err(|e| Error::format(path, format!("bad field architecture: {e}")))?;
        Self::load(path, arch)
    }
}

const QUERY_CHUNK: usize = 16_384;

impl<T: Scalar> VolumeField<T> for RadianceField<T> {
    fn query(&self, points: &[Vec3], dirs: &[Vec3]) -> Result<(Vec<T>, Vec<T>)> {
        let mut dens = Vec::with_capacity(points.len());
        let mut rgb = Vec::with_capacity(points.len() * 3);
        for (pc, dc) in points.chunks(QUERY_CHUNK).zip(dirs.chunks(QUERY_CHUNK)) {
            let mut tape = Tape::new();
            let p = self.params.load(&mut tape);
            let (d, c) = self.forward(&mut tape, &p, pc, dc);
            dens.extend_from_slice(tape.data(d));
            rgb.extend_from_slice(tape.data(c));
        }
        Ok((dens, rgb))
    }
}

/// Every pixel ray of a camera, row-major.
pub fn camera_rays(camera: &CameraModel) -> Result<Vec<Ray>> {
    let mut rays = Vec::with_capacity(camera.width * camera.height);
    for r in 0..camera.height {
        for c in 0..camera.width {
            rays.push(cast_ray(camera, r, c)?);
        }
    }
    Ok(rays)
}

const RENDER_CHUNK: usize = 512;

pub fn render_view<T: Scalar, F: VolumeField<T> + ?Sized>(field: &F, camera: &CameraModel, cfg: &RenderConfig) -> Result<Image<T>> {
    let Full { image, .. } = render_view_full(field, camera, cfg)?;
    Ok(image)
}

/// A rendered view together with the per-ray weights and sample points.
pub struct Full<T> {
    pub image: Image<T>,
    pub rays: Vec<RayRender<T>>,
}

pub fn render_view_full<T: Scalar, F: VolumeField<T> + ?Sized>(field: &F, camera: &CameraModel, cfg: &RenderConfig) -> Result<Full<T>> {
    let mut cfg = cfg.clone();
    cfg.stratified = false;
    let rays = camera_rays(camera)?;
    let mut out = Vec::with_capacity(rays.len());
    for chunk in rays.chunks(RENDER_CHUNK) {
        out.extend(render_rays(field, chunk, &cfg, None)?);
    }
    let data = out.iter().flat_map(|r| r.color).collect();
    Ok(Full { image: Image::new(camera.width, camera.height, data)?, rays: out })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub arch: FieldArch,
    pub epochs: usize,
    pub lr: f64,
    /// Rays per optimizer step.
    pub batch_rays: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { arch: FieldArch::default(), epochs: 8, lr: 5e-3, batch_rays: 1024, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitReport {
    /// Loss of the very first batch, before any update.
    pub initial_loss: f64,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

impl FitReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

/// Loss and gradients of one batch; exposed for gradient checking.
pub fn batch_loss<T: Scalar>(
    field: &RadianceField<T>,
    rays: &[Ray],
    truth: &[T],
    cfg: &RenderConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(T, crate::nn::Gradients<T>)> {
    cfg.validate()?;
    let p = cfg.samples;
    let mut rng = rng;
    let mut points = Vec::with_capacity(rays.len() * p);
    let mut dirs = Vec::with_capacity(rays.len() * p);
    let mut deltas = Vec::with_capacity(rays.len() * p);
    for ray in rays {
        let span = ray_span(ray, cfg);
        span.validate()?;
        for t in span.sample_ts(rng.as_deref_mut()) {
            points.push(ray.at(t));
            dirs.push(ray.dir);
            deltas.push(T::of(span.step()));
        }
    }
    let mut tape = Tape::new();
    let pv = field.params.load(&mut tape);
    let (dens, rgb) = field.forward(&mut tape, &pv, &points, &dirs);
    let color = tape.composite(dens, rgb, deltas, cfg.background.map(T::of), p);
    let target = tape.leaf(Tensor::new(vec![rays.len(), 3], truth.to_vec()));
    let loss = tape.mse(color, target);
    let value = tape.value(loss).item();
    Ok((value, tape.backward(loss)))
}

/// Fits a field to the training views with Adam on random ray batches.
///
/// One epoch is one shuffled pass over every training pixel.
pub fn fit_radiance_field<T: Scalar>(
    dataset: &MultiViewDataset<T>,
    cfg: &RenderConfig,
    fit: &FitConfig,
) -> Result<(RadianceField<T>, FitReport)> {
    cfg.validate()?;
    let train = dataset.split_indices(Split::Train);
    if train.is_empty() {
        return Err(Error::invalid("dataset has no training views"));
    }
    let mut rays = Vec::new();
    let mut colors: Vec<T> = Vec::new();
    for &v in &train {
        let view = &dataset.views[v];
        rays.extend(camera_rays(&view.camera)?);
        colors.extend_from_slice(&view.image.data);
    }
    let mut field = RadianceField::<T>::new(fit.arch, fit.seed)?;
    let mut opt = Adam::<T>::new(fit.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(fit.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..rays.len()).collect();
    let mut report = FitReport::default();
    let mut train_cfg = cfg.clone();
    train_cfg.stratified = true;
    let batch = fit.batch_rays.max(1);
    let mut batch_rays = Vec::with_capacity(batch);
    let mut batch_truth = Vec::with_capacity(3 * batch);
    for epoch in 0..fit.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for idx in order.chunks(batch) {
            batch_rays.clear();
            batch_truth.clear();
            for &i in idx {
                batch_rays.push(rays[i]);
                batch_truth.extend_from_slice(&colors[3 * i..3 * i + 3]);
            }
            let (loss, grads) = batch_loss(&field, &batch_rays, &batch_truth, &train_cfg, Some(&mut rng))?;
            let loss = loss.f64();
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, msg: format!("photometric loss became {loss}") });
            }
            if epoch == 0 && steps == 0 {
                report.initial_loss = loss;
            }
            opt.step(&mut field.params, &grads);
            total += loss;
            steps += 1;
        }
        if !field.params.is_finite() {
            return Err(Error::Divergence { epoch, msg: "non-finite parameters".into() });
        }
        report.epoch_losses.push(total / steps as f64);
    }
    Ok((field, report))
}
