//! Synthetic multi-view scenes with exact ground truth.
//!
//! Scenes are unions of constant-colour spheres and boxes inside an
//! axis-aligned bounding box. [`analytic_render`] volume-renders them by
//! uniform quadrature and [`ground_truth_object_mask`] intersects rays with
//! the primitives exactly; both act as oracles for the learned components.
//!
//! On disk a dataset is a directory holding `cameras.json` plus one 16-bit
//! PNG per view (`view_0000.png`, ...) and optional 8-bit object masks
//! (`mask_<object>_<view>.png`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Mat3, Vec3};
use crate::nn::composite_ray;
use crate::raster::{dequant16, quant16, Image, Mask};
use crate::scalar::Scalar;

/// Pinhole camera. The camera looks down its local −z axis with +y up;
/// pixel `(row, col)` has its centre at image coordinates `(col, row)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera-to-world rotation, row-major.
    pub rotation: Mat3,
    /// Camera centre in world coordinates (metres).
    pub translation: Vec3,
}

impl CameraModel {
    pub fn new(width: usize, height: usize, focal: f64, rotation: Mat3, translation: Vec3) -> Result<Self> {
        let cam = Self {
            width,
            height,
            focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with `up` fixing the roll.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, width: usize, height: usize, focal: f64) -> Result<Self> {
        let back = geometry::normalize(geometry::sub(eye, target));
        let right = geometry::normalize(geometry::cross(up, back));
        let true_up = geometry::cross(back, right);
        let rotation = [
            [right[0], true_up[0], back[0]],
            [right[1], true_up[1], back[1]],
            [right[2], true_up[2], back[2]],
        ];
        Self::new(width, height, focal, rotation, eye)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.focal.is_finite()
            && self.cx.is_finite()
            && self.cy.is_finite()
            && self.rotation.iter().flatten().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("camera has non-finite parameters"));
        }
        if self.focal <= 0.0 {
            return Err(Error::invalid(format!("focal length must be positive, got {}", self.focal)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera image size must be nonzero"));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let col_dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (col_dot - want).abs() > 1e-6 {
                    return Err(Error::invalid("camera rotation is not orthonormal"));
                }
            }
        }
        if (geometry::det3(r) - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("camera rotation must have determinant +1"));
        }
        Ok(())
    }

    pub fn position(&self) -> Vec3 {
        self.translation
    }

    /// Unit world-space direction through the centre of pixel `(row, col)`.
    pub fn pixel_direction(&self, row: usize, col: usize) -> Result<Vec3> {
        if row >= self.height || col >= self.width {
            return Err(Error::InvalidArgument(format!(
                "pixel ({row}, {col}) outside {}×{} image",
                self.height, self.width
            )));
        }
        let local = [(col as f64 - self.cx) / self.focal, -(row as f64 - self.cy) / self.focal, -1.0];
        Ok(geometry::normalize(geometry::mat_vec(&self.rotation, local)))
    }

    /// Top three rows of the 4×4 camera-to-world matrix, row-major.
    pub fn c2w(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1], r[2][2], t[2],
        ]
    }

    pub fn from_c2w(width: usize, height: usize, focal: f64, cx: f64, cy: f64, m: &[f64; 12]) -> Result<Self> {
        let cam = Self {
            width,
            height,
            focal,
            cx,
            cy,
            rotation: [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]],
            translation: [m[3], m[7], m[11]],
        };
        cam.validate()?;
        Ok(cam)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half: Vec3 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: Vec3,
    pub color: [f64; 3],
    /// Extinction per metre.
    pub density: f64,
    pub object_id: u32,
}

impl Primitive {
    pub fn contains(&self, p: Vec3) -> bool {
        let d = geometry::sub(p, self.center);
        match self.shape {
            Shape::Sphere { radius } => geometry::dot(d, d) <= radius * radius,
            Shape::Box { half } => (0..3).all(|a| d[a].abs() <= half[a]),
        }
    }

    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        match self.shape {
            Shape::Sphere { radius } => geometry::ray_sphere(origin, dir, self.center, radius),
            Shape::Box { half } => geometry::ray_aabb(
                origin,
                dir,
                geometry::sub(self.center, half),
                geometry::add(self.center, half),
            ),
        }
    }

    /// Radius of the smallest centred sphere containing the primitive.
    pub fn bounding_radius(&self) -> f64 {
        match self.shape {
            Shape::Sphere { radius } => radius,
            Shape::Box { half } => geometry::norm(half),
        }
    }

    fn extent(&self) -> Vec3 {
        match self.shape {
            Shape::Sphere { radius } => [radius; 3],
            Shape::Box { half } => half,
        }
    }

    /// Human-readable label such as "red sphere".
    pub fn label(&self) -> String {
        let shape = match self.shape {
            Shape::Sphere { .. } => "sphere",
            Shape::Box { .. } => "box",
        };
        format!("{} {shape}", color_name(self.color))
    }
}

const PALETTE: [(&str, [f64; 3]); 8] = [
    ("red", [0.9, 0.15, 0.1]),
    ("green", [0.15, 0.75, 0.2]),
    ("blue", [0.15, 0.3, 0.9]),
    ("yellow", [0.95, 0.85, 0.15]),
    ("magenta", [0.85, 0.2, 0.8]),
    ("cyan", [0.15, 0.8, 0.85]),
    ("orange", [0.95, 0.55, 0.1]),
    ("white", [0.95, 0.95, 0.95]),
];

/// Name of the palette colour closest to `rgb`.
pub fn color_name(rgb: [f64; 3]) -> &'static str {
    PALETTE
        .iter()
        .min_by(|a, b| {
            let da: f64 = (0..3).map(|i| (a.1[i] - rgb[i]).powi(2)).sum();
            let db: f64 = (0..3).map(|i| (b.1[i] - rgb[i]).powi(2)).sum();
            da.total_cmp(&db)
        })
        .map(|p| p.0)
        .unwrap_or("gray")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub lo: Vec3,
    pub hi: Vec3,
}

impl Aabb {
    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] <= self.hi[a])
    }

    /// Ray segment inside the box, clipped to `t ≥ 0`.
    pub fn clip_ray(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        let (t0, t1) = geometry::ray_aabb(origin, dir, self.lo, self.hi)?;
        let t0 = t0.max(0.0);
        (t1 > t0).then_some((t0, t1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub bounds: Aabb,
    pub background: [f64; 3],
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::BTreeSet::new();
        for p in &self.primitives {
            if !(p.density >= 0.0) {
                return Err(Error::invalid(format!("object {} has negative density", p.object_id)));
            }
            if !ids.insert(p.object_id) {
                return Err(Error::invalid(format!("duplicate object id {}", p.object_id)));
            }
            let e = p.extent();
            let inside = (0..3).all(|a| p.center[a] - e[a] >= self.bounds.lo[a] && p.center[a] + e[a] <= self.bounds.hi[a]);
            if !inside {
                return Err(Error::invalid(format!("object {} leaves the bounding box", p.object_id)));
            }
        }
        Ok(())
    }

    pub fn object(&self, id: u32) -> Option<&Primitive> {
        self.primitives.iter().find(|p| p.object_id == id)
    }

    /// Total density and density-weighted colour at a point.
    pub fn sample(&self, p: Vec3) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut c = [0.0; 3];
        for prim in &self.primitives {
            if prim.density > 0.0 && prim.contains(p) {
                sigma += prim.density;
                for k in 0..3 {
                    c[k] += prim.density * prim.color[k];
                }
            }
        }
        if sigma > 0.0 {
            for v in &mut c {
                *v /= sigma;
            }
        }
        (sigma, c)
    }

    /// Object hit first along a ray, ignoring transparent primitives.
    pub fn first_hit(&self, origin: Vec3, dir: Vec3) -> Option<(f64, u32)> {
        let mut best: Option<(f64, u32)> = None;
        for prim in &self.primitives {
            if prim.density <= 0.0 {
                continue;
            }
            if let Some((t0, t1)) = prim.intersect(origin, dir) {
                if t1 < 0.0 {
                    continue;
                }
                let t = t0.max(0.0);
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, prim.object_id));
                }
            }
        }
        best
    }
}

/// Random non-overlapping scene of `n_objects` opaque primitives in `[-1, 1]³`,
/// alternating spheres (odd ids) and boxes (even ids).
pub fn build_synthetic_scene(seed: u64, n_objects: usize) -> Result<SceneSpec> {
    if n_objects < 1 {
        return Err(Error::invalid("a scene needs at least one object"));
    }
    if n_objects > PALETTE.len() {
        return Err(Error::InvalidArgument(format!("at most {} objects are supported", PALETTE.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds = Aabb { lo: [-1.0; 3], hi: [1.0; 3] };
    let mut prims: Vec<Primitive> = Vec::with_capacity(n_objects);
    let mut attempts = 0;
    while prims.len() < n_objects {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::invalid("could not place objects without overlap"));
        }
        let size: f64 = rng.gen_range(0.25..0.4);
        let shape = if prims.len() % 2 == 0 {
            Shape::Sphere { radius: size }
        } else {
            let h = size / 3f64.sqrt() * 1.3;
            Shape::Box { half: [h, h * rng.gen_range(0.8..1.2), h] }
        };
        let center = [rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(-0.4..0.4)];
        let idx = prims.len();
        let palette = PALETTE[idx % PALETTE.len()].1;
        let jitter: f64 = rng.gen_range(-0.03..0.03);
        let cand = Primitive {
            shape,
            center,
            color: palette.map(|c| (c + jitter).clamp(0.0, 1.0)),
            density: 200.0,
            object_id: idx as u32 + 1,
        };
        let overlaps = prims.iter().any(|p| {
            geometry::norm(geometry::sub(p.center, cand.center)) < p.bounding_radius() + cand.bounding_radius() + 0.05
        });
        let e = cand.extent();
        let inside = (0..3).all(|a| center[a] - e[a] >= bounds.lo[a] && center[a] + e[a] <= bounds.hi[a]);
        if !overlaps && inside {
            prims.push(cand);
        }
    }
    let scene = SceneSpec { primitives: prims, bounds, background: [0.8, 0.8, 0.8] };
    scene.validate()?;
    Ok(scene)
}

/// Uniform-quadrature volume rendering of the exact scene densities.
pub fn analytic_render<T: Scalar>(scene: &SceneSpec, camera: &CameraModel, samples_per_ray: usize) -> Result<Image<T>> {
    if samples_per_ray < 1 {
        return Err(Error::invalid("samples_per_ray must be at least 1"));
    }
    camera.validate()?;
    let bg = scene.background;
    let mut img = Image::filled(camera.width, camera.height, bg.map(T::of));
    let origin = camera.position();
    let mut dens = vec![0.0; samples_per_ray];
    let mut rgb = vec![0.0; 3 * samples_per_ray];
    let mut deltas = vec![0.0; samples_per_ray];
    for row in 0..camera.height {
        for col in 0..camera.width {
            let dir = camera.pixel_direction(row, col)?;
            let Some((t0, t1)) = scene.bounds.clip_ray(origin, dir) else { continue };
            let step = (t1 - t0) / samples_per_ray as f64;
            for i in 0..samples_per_ray {
                let t = t0 + (i as f64 + 0.5) * step;
                let (s, c) = scene.sample(geometry::add(origin, geometry::scale(dir, t)));
                dens[i] = s;
                rgb[3 * i..3 * i + 3].copy_from_slice(&c);
                deltas[i] = step;
            }
            let (color, _, _) = composite_ray(&dens, &rgb, &deltas, bg);
            img.set_pixel(row, col, color.map(|v| T::of(v.clamp(0.0, 1.0))));
        }
    }
    Ok(img)
}

/// Pixels whose ray first meets `object_id`.
pub fn ground_truth_object_mask(scene: &SceneSpec, camera: &CameraModel, object_id: u32) -> Result<Mask> {
    if scene.object(object_id).is_none() {
        return Err(Error::NotFound(format!("object id {object_id}")));
    }
    camera.validate()?;
    let mut mask = Mask::empty(camera.width, camera.height);
    let origin = camera.position();
    for row in 0..camera.height {
        for col in 0..camera.width {
            let dir = camera.pixel_direction(row, col)?;
            if let Some((_, id)) = scene.first_hit(origin, dir) {
                mask.set(row, col, id == object_id);
            }
        }
    }
    Ok(mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct View<T> {
    pub image: Image<T>,
    pub camera: CameraModel,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewDataset<T> {
    pub views: Vec<View<T>>,
    /// Ground-truth masks per object id, one per view.
    pub masks: BTreeMap<u32, Vec<Mask>>,
}

impl<T: Scalar> MultiViewDataset<T> {
    pub fn validate(&self) -> Result<()> {
        if self.views.len() < 2 {
            return Err(Error::invalid("a dataset needs at least two views"));
        }
        let (w, h) = (self.views[0].image.width, self.views[0].image.height);
        for (i, v) in self.views.iter().enumerate() {
            if v.image.width != w || v.image.height != h {
                return Err(Error::InvalidArgument(format!("view {i} has a different image size")));
            }
            if v.camera.width != w || v.camera.height != h {
                return Err(Error::InvalidArgument(format!("view {i} camera does not match its image")));
            }
        }
        for (id, ms) in &self.masks {
            if ms.len() != self.views.len() {
                return Err(Error::InvalidArgument(format!("object {id} needs one mask per view")));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.views[0].image.width
    }

    pub fn height(&self) -> usize {
        self.views[0].image.height
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.views.len()).filter(|&i| self.views[i].split == split).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub width: usize,
    pub height: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Focal length as a multiple of the image width.
    pub focal_factor: f64,
    /// Camera distance from the scene centre.
    pub radius: f64,
    pub max_azimuth_deg: f64,
    pub max_elevation_deg: f64,
    pub samples_per_ray: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            n_train: 20,
            n_test: 5,
            focal_factor: 1.6,
            radius: 4.0,
            max_azimuth_deg: 25.0,
            max_elevation_deg: 15.0,
            samples_per_ray: 256,
            seed: 0,
        }
    }
}

/// Forward-facing camera rig on a spherical cap around +z; view 0 is frontal.
pub fn camera_rig(cfg: &DatasetConfig) -> Result<Vec<CameraModel>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ca3e);
    let n = cfg.n_train + cfg.n_test;
    let focal = cfg.focal_factor * cfg.width as f64;
    (0..n)
        .map(|i| {
            let (az, el) = if i == 0 {
                (0.0, 0.0)
            } else {
                (
                    rng.gen_range(-cfg.max_azimuth_deg..=cfg.max_azimuth_deg).to_radians(),
                    rng.gen_range(-cfg.max_elevation_deg..=cfg.max_elevation_deg).to_radians(),
                )
            };
            let eye = [cfg.radius * el.cos() * az.sin(), cfg.radius * el.sin(), cfg.radius * el.cos() * az.cos()];
            CameraModel::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], cfg.width, cfg.height, focal)
        })
        .collect()
}

/// Renders every rig view of `scene` (quantized to 16 bits) plus object masks.
pub fn build_dataset<T: Scalar>(scene: &SceneSpec, cfg: &DatasetConfig) -> Result<MultiViewDataset<T>> {
    scene.validate()?;
    let cams = camera_rig(cfg)?;
    let mut views = Vec::with_capacity(cams.len());
    let mut masks: BTreeMap<u32, Vec<Mask>> = BTreeMap::new();
    for (i, cam) in cams.into_iter().enumerate() {
        let mut image = analytic_render::<T>(scene, &cam, cfg.samples_per_ray)?;
        image.quantize16();
        for p in &scene.primitives {
            masks.entry(p.object_id).or_default().push(ground_truth_object_mask(scene, &cam, p.object_id)?);
        }
        let split = if i < cfg.n_train { Split::Train } else { Split::Test };
        views.push(View { image, camera: cam, split });
    }
    let ds = MultiViewDataset { views, masks };
    ds.validate()?;
    Ok(ds)
}

/// Object-only views (background zeroed by the oracle mask) drawn from
/// successive synthetic scenes, `views_per_scene` poses each, until `count`
/// images are collected. Scene `k` uses seed `first_seed + k`.
pub fn object_view_corpus<T: Scalar>(
    count: usize,
    first_seed: u64,
    objects_per_scene: usize,
    views_per_scene: usize,
    cfg: &DatasetConfig,
) -> Result<Vec<Image<T>>> {
    if views_per_scene == 0 {
        return Err(Error::invalid("corpus needs at least one view per scene"));
    }
    let mut out = Vec::with_capacity(count);
    let mut seed = first_seed;
    while out.len() < count {
        let scene = build_synthetic_scene(seed, objects_per_scene)?;
        let dcfg = DatasetConfig { n_train: views_per_scene, n_test: 0, seed, ..cfg.clone() };
        let ds = build_dataset::<T>(&scene, &dcfg)?;
        for masks in ds.masks.values() {
            for (view, mask) in ds.views.iter().zip(masks) {
                if out.len() < count {
                    out.push(view.image.masked(mask));
                }
            }
        }
        seed += 1;
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct CamerasFile {
    width: usize,
    height: usize,
    focal: f64,
    cx: f64,
    cy: f64,
    views: Vec<ViewEntry>,
    #[serde(default)]
    mask_objects: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct ViewEntry {
    file: String,
    split: Split,
    c2w: Vec<f64>,
}

pub const CAMERAS_FILE: &str = "cameras.json";

/// Writes `cameras.json`, one 16-bit PNG per view and any object masks.
///
/// Pixel values must already lie on the 16-bit grid (see
/// [`Image::quantize16`]) so that loading reproduces them exactly.
pub fn save_dataset<T: Scalar>(dataset: &MultiViewDataset<T>, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cam0 = &dataset.views[0].camera;
    if dataset.views.iter().any(|v| v.camera.focal != cam0.focal || v.camera.cx != cam0.cx || v.camera.cy != cam0.cy) {
        return Err(Error::invalid("all views must share intrinsics"));
    }
    let mut entries = Vec::with_capacity(dataset.views.len());
    for (i, view) in dataset.views.iter().enumerate() {
        let file = format!("view_{i:04}.png");
        let mut buf = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(view.image.width as u32, view.image.height as u32);
        for (k, px) in buf.pixels_mut().enumerate() {
            let vals = &view.image.data[3 * k..3 * k + 3];
            let q = [quant16(vals[0]), quant16(vals[1]), quant16(vals[2])];
            for (c, &v) in vals.iter().enumerate() {
                if dequant16::<T>(q[c]) != v {
                    return Err(Error::InvalidArgument(format!(
                        "view {i} holds values off the 16-bit grid; quantize before saving"
                    )));
                }
            }
            *px = image::Rgb(q);
        }
        let path = dir.join(&file);
        buf.save(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        entries.push(ViewEntry { file, split: view.split, c2w: view.camera.c2w().to_vec() });
    }
    for (id, ms) in &dataset.masks {
        for (i, m) in ms.iter().enumerate() {
            let path = dir.join(format!("mask_{id}_{i:04}.png"));
            let buf = image::GrayImage::from_fn(m.width as u32, m.height as u32, |x, y| {
                image::Luma([if m.get(y as usize, x as usize) { 255 } else { 0 }])
            });
            buf.save(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        }
    }
    let meta = CamerasFile {
        width: dataset.width(),
        height: dataset.height(),
        focal: cam0.focal,
        cx: cam0.cx,
        cy: cam0.cy,
        views: entries,
        mask_objects: dataset.masks.keys().copied().collect(),
    };
    let path = dir.join(CAMERAS_FILE);
    let text = serde_json::to_string_pretty(&meta).expect("serializable metadata");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset<T: Scalar>(dir: &Path) -> Result<MultiViewDataset<T>> {
    let meta_path = dir.join(CAMERAS_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    let meta: CamerasFile = serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    let mut views = Vec::with_capacity(meta.views.len());
    for entry in &meta.views {
        let c2w: [f64; 12] = entry
            .c2w
            .as_slice()
            .try_into()
            .map_err(|_| Error::format(&meta_path, format!("{}: c2w needs 12 values", entry.file)))?;
        let camera = CameraModel::from_c2w(meta.width, meta.height, meta.focal, meta.cx, meta.cy, &c2w)
            .map_err(|e| Error::format(&meta_path, format!("{}: {e}", entry.file)))?;
        let path = dir.join(&entry.file);
        let img = image::open(&path).map_err(|e| Error::format(&path, e.to_string()))?.into_rgb16();
        if img.width() as usize != meta.width || img.height() as usize != meta.height {
            return Err(Error::format(
                &path,
                format!("image is {}×{}, expected {}×{}", img.width(), img.height(), meta.width, meta.height),
            ));
        }
        let data = img.pixels().flat_map(|p| p.0).map(dequant16).collect();
        let image = Image::new(meta.width, meta.height, data)?;
        views.push(View { image, camera, split: entry.split });
    }
    let mut masks = BTreeMap::new();
    for &id in &meta.mask_objects {
        let mut ms = Vec::with_capacity(views.len());
        for i in 0..views.len() {
            let path = dir.join(format!("mask_{id}_{i:04}.png"));
            let img = image::open(&path).map_err(|e| Error::format(&path, e.to_string()))?.into_luma8();
            if img.width() as usize != meta.width || img.height() as usize != meta.height {
                return Err(Error::format(&path, "mask size does not match the dataset"));
            }
            ms.push(Mask {
                width: meta.width,
                height: meta.height,
                data: img.pixels().map(|p| p.0[0] > 127).collect(),
            });
        }
        masks.insert(id, ms);
    }
    let ds = MultiViewDataset { views, masks };
    ds.validate().map_err(|e| Error::format(&meta_path, e.to_string()))?;
    Ok(ds)
}

/// Writes a 16-bit RGB PNG; values are clamped to [0, 1] and rounded.
pub fn save_png<T: Scalar>(image: &Image<T>, path: &Path) -> Result<()> {
    let mut buf = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(image.width as u32, image.height as u32);
    for (k, px) in buf.pixels_mut().enumerate() {
        let v = &image.data[3 * k..3 * k + 3];
        *px = image::Rgb([quant16(v[0]), quant16(v[1]), quant16(v[2])]);
    }
    buf.save(path).map_err(|e| Error::format(path, e.to_string()))
}

/// Reads any PNG the `image` crate understands as RGB in [0, 1].
pub fn load_png<T: Scalar>(path: &Path) -> Result<Image<T>> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?.into_rgb16();
    let data = img.pixels().flat_map(|p| p.0).map(dequant16).collect();
    Image::new(img.width() as usize, img.height() as usize, data)
}

pub fn save_scene(scene: &SceneSpec, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(scene).expect("serializable scene");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_scene(path: &Path) -> Result<SceneSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let scene: SceneSpec = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    scene.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis_camera(size: usize, focal: f64, z: f64) -> CameraModel {
        CameraModel::look_at([0.0, 0.0, z], [0.0; 3], [0.0, 1.0, 0.0], size, size, focal).unwrap()
    }

    fn one_sphere(density: f64, color: [f64; 3], radius: f64) -> SceneSpec {
        SceneSpec {
            primitives: vec![Primitive {
                shape: Shape::Sphere { radius },
                center: [0.0; 3],
                color,
                density,
                object_id: 1,
            }],
            bounds: Aabb { lo: [-1.0; 3], hi: [1.0; 3] },
            background: [0.2, 0.4, 0.6],
        }
    }

    #[test]
    fn scene_generation_is_seeded_and_rejects_zero_objects() {
        let a = build_synthetic_scene(0, 1).unwrap();
        assert_eq!(a.primitives.len(), 1);
        assert_eq!(a, build_synthetic_scene(0, 1).unwrap());
        let b = build_synthetic_scene(1, 1).unwrap();
        assert_ne!(a.primitives[0].center, b.primitives[0].center);
        assert!(matches!(build_synthetic_scene(0, 0), Err(Error::InvalidArgument(_))));
        let three = build_synthetic_scene(3, 3).unwrap();
        three.validate().unwrap();
    }

    #[test]
    fn empty_scene_renders_background() {
        let scene = one_sphere(0.0, [1.0, 0.0, 0.0], 0.5);
        let img: Image<f64> = analytic_render(&scene, &axis_camera(8, 8.0, 3.0), 64).unwrap();
        for px in img.data.chunks(3) {
            assert_eq!(px, &scene.background);
        }
    }

    #[test]
    fn opaque_sphere_centre_pixel_takes_its_colour() {
        let scene = one_sphere(1e6, [1.0, 0.0, 0.0], 0.5);
        let cam = axis_camera(16, 16.0, 3.0);
        // The centre pixel's ray is the optical axis, which hits the sphere at t = 2.5.
        assert!(scene.object(1).unwrap().intersect(cam.position(), cam.pixel_direction(8, 8).unwrap()).is_some());
        let img: Image<f64> = analytic_render(&scene, &cam, 256).unwrap();
        let c = img.pixel(8, 8);
        for (got, want) in c.iter().zip([1.0, 0.0, 0.0]) {
            assert!((got - want).abs() < 1e-3);
        }
    }

    #[test]
    fn occluding_box_hides_sphere_behind_it() {
        let mut scene = one_sphere(1e4, [1.0, 0.0, 0.0], 0.3);
        scene.primitives[0].center = [0.0, 0.0, -0.5];
        scene.primitives.push(Primitive {
            shape: Shape::Box { half: [0.4, 0.4, 0.1] },
            center: [0.0, 0.0, 0.5],
            color: [0.0, 0.0, 1.0],
            density: 1e4,
            object_id: 2,
        });
        let cam = axis_camera(16, 16.0, 3.0);
        let img: Image<f64> = analytic_render(&scene, &cam, 256).unwrap();
        let c = img.pixel(8, 8);
        assert!((c[2] - 1.0).abs() < 1e-3 && c[0].abs() < 1e-3);
        // Nearest-hit oracle agrees.
        assert_eq!(scene.first_hit(cam.position(), cam.pixel_direction(8, 8).unwrap()).unwrap().1, 2);
        assert_eq!(ground_truth_object_mask(&scene, &cam, 1).unwrap().count(), 0);
    }

    #[test]
    fn lone_sphere_mask_matches_projected_disk_area() {
        let scene = one_sphere(100.0, [0.0, 1.0, 0.0], 0.5);
        let (size, focal, dist) = (128, 200.0, 3.0);
        let mask = ground_truth_object_mask(&scene, &axis_camera(size, focal, dist), 1).unwrap();
        // Silhouette of a sphere seen from distance d has angular radius asin(r/d).
        let half_angle = (0.5f64 / dist).asin();
        let disk_radius_px = focal * half_angle.tan();
        let expected = std::f64::consts::PI * disk_radius_px * disk_radius_px;
        let rel = (mask.count() as f64 - expected).abs() / expected;
        assert!(rel < 0.02, "area {} vs {expected}", mask.count());
    }

    #[test]
    fn unknown_object_is_not_found_and_empty_region_is_zero() {
        let scene = one_sphere(100.0, [0.0, 1.0, 0.0], 0.2);
        let cam = CameraModel::look_at([0.0, 0.0, 3.0], [0.9, 0.9, 0.0], [0.0, 1.0, 0.0], 8, 8, 40.0).unwrap();
        assert!(matches!(ground_truth_object_mask(&scene, &cam, 9), Err(Error::NotFound(_))));
        assert_eq!(ground_truth_object_mask(&scene, &cam, 1).unwrap().count(), 0);
    }

    #[test]
    fn camera_validation_rejects_bad_poses() {
        let skew = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(CameraModel::new(4, 4, 2.0, skew, [0.0; 3]).is_err());
        let mirror = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(CameraModel::new(4, 4, 2.0, mirror, [0.0; 3]).is_err());
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(CameraModel::new(4, 4, -2.0, id, [0.0; 3]).is_err());
        assert!(CameraModel::new(4, 4, 2.0, id, [f64::NAN, 0.0, 0.0]).is_err());
    }
}
