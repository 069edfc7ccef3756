//! End-to-end link: scene → object extraction → CSI estimation → semantic
//! transfer over the fading channel → receiver-side field → metrics.
//!
//! Configuration is one flat TOML table ([`RunConfig`]); every training
//! stage is seeded from it, so a config hash plus a seed reproduce every CSV
//! byte (wall-clock columns are only written when `timing = true`).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{draw_channel, equalize, noise_power_for_snr, transmit, ChannelModel, ChannelRealization, EqualizeMode};
use crate::csi_estimation::{
    amp_estimate, ls_estimate, mmse_estimate, observe_pilots, omp_estimate, train_gdce, ChannelPrior, CsiImage,
    DenoiserConfig, Dictionary, GanConfig, GdceConfig, GdceModels, PilotBlock, RefineOptions,
};
use crate::error::{Error, Result};
use crate::metrics::{self, csv_float, MetricReport};
use crate::object_lifter::{
    extract_object_views, lift_mask_to_3d, segment_with_prompt, LiftConfig, MaskGrid, PointLookup, Prompt, RegionGrowing,
    SegMask2D,
};
use crate::radiance_field::{fit_radiance_field, render_view, FitConfig, RadianceField, RenderConfig};
use crate::raster::{Image, Mask};
use crate::scalar::Scalar;
use crate::scene_io::{self, DatasetConfig, MultiViewDataset, SceneSpec, Split, View};
use crate::semantic_codec::{train_codec, transfer_image, CodecConfig, CodecMode, CodecTrainConfig, SemanticCodec, TrainChannel};

/// Which channel estimate the receiver equalizes with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    /// Perfect CSI.
    True,
    Ls,
    Mmse,
    Omp,
    Amp,
    Cgan,
    Gdce,
}

impl Estimator {
    pub const ALL: [Estimator; 7] = [Self::True, Self::Ls, Self::Mmse, Self::Omp, Self::Amp, Self::Cgan, Self::Gdce];

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown estimator '{s}'")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::True => "true",
            Self::Ls => "ls",
            Self::Mmse => "mmse",
            Self::Omp => "omp",
            Self::Amp => "amp",
            Self::Cgan => "cgan",
            Self::Gdce => "gdce",
        }
    }

    fn learned(self) -> bool {
        matches!(self, Self::Cgan | Self::Gdce)
    }
}

/// Flat run configuration. Every key is optional in the TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // scene
    pub scene_seed: u64,
    pub objects: usize,
    /// Scene JSON; required when `dataset` is given.
    pub scene: Option<PathBuf>,
    /// Dataset directory to load instead of rendering the scene.
    pub dataset: Option<PathBuf>,
    pub width: usize,
    pub height: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub samples_per_ray: usize,
    /// Seed of every training stage.
    pub train_seed: u64,

    // transmitter field
    pub field: Option<PathBuf>,
    pub field_epochs: usize,
    pub render_samples: usize,

    // prompt and lifting
    /// `object:<id>`, pixel list `row,col;row,col`, or text looked up in `prompt_points`.
    pub prompt: String,
    pub prompt_points: Option<PathBuf>,
    pub prompt_view: usize,
    pub segment_tau: f64,
    pub lift_res: usize,
    pub lift_iters: usize,
    pub lift_lambda: f64,

    // codec
    pub codec: Option<PathBuf>,
    pub mode: CodecMode,
    /// Keep rate applied at transmission time.
    pub keep_rate: f64,
    /// Keep rate the codec is trained with.
    pub codec_keep_rate: f64,
    pub codec_epochs: usize,
    pub codec_images: usize,
    pub codec_views_per_scene: usize,
    pub codec_corpus_seed: u64,

    // channel
    /// `awgn`, `rayleigh` or `rician`.
    pub channel: String,
    pub rician_k: f64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Views sharing one channel realization and estimate; 0 means all.
    pub coherence_views: usize,

    // estimation
    pub estimator: Estimator,
    pub pilot_stride: usize,
    pub pilot_seed: u64,
    /// Checkpoint stem of a trained GDCE (`<stem>.gen`, `<stem>.den`).
    pub gdce: Option<PathBuf>,
    pub gan_epochs: usize,
    pub denoiser_epochs: usize,
    pub prior_draws: usize,
    pub omp_atoms: usize,
    pub amp_iters: usize,
    pub amp_threshold: f64,

    // receiver
    /// Epochs of the receiver field; 0 scores the received views directly.
    pub rx_epochs: usize,
    pub rx_lr: f64,

    // sweep
    pub snr_db: Vec<f64>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene_seed: 0,
            objects: 3,
            scene: None,
            dataset: None,
            width: 64,
            height: 64,
            n_train: 20,
            n_test: 5,
            samples_per_ray: 256,
            train_seed: 0,
            field: None,
            field_epochs: 4,
            render_samples: 48,
            prompt: "object:1".into(),
            prompt_points: None,
            prompt_view: 0,
            segment_tau: 0.1,
            lift_res: 64,
            lift_iters: 200,
            lift_lambda: 0.05,
            codec: None,
            mode: CodecMode::Student,
            keep_rate: 0.2,
            codec_keep_rate: 0.2,
            codec_epochs: 40,
            codec_images: 100,
            codec_views_per_scene: 4,
            codec_corpus_seed: 1000,
            channel: "rician".into(),
            rician_k: 3.0,
            grid_rows: 16,
            grid_cols: 16,
            coherence_views: 0,
            estimator: Estimator::True,
            pilot_stride: 4,
            pilot_seed: 7,
            gdce: None,
            gan_epochs: 200,
            denoiser_epochs: 100,
            prior_draws: 2000,
            omp_atoms: 8,
            amp_iters: 30,
            amp_threshold: 1.5,
            rx_epochs: 4,
            rx_lr: 1e-3,
            snr_db: vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0],
            seeds: vec![0],
            out_dir: PathBuf::from("out"),
            timing: false,
        }
    }
}

/// Environment variable overriding `out_dir`.
pub const OUT_DIR_ENV: &str = "SEMCOM3D_OUT_DIR";

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("bad config: {e}")))
    }

    /// Reads a TOML file, applies the output directory override and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.apply_env();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
            self.out_dir = PathBuf::from(dir);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.snr_db.is_empty() {
            return bad("the SNR list is empty".into());
        }
        if let Some(s) = self.snr_db.iter().find(|s| s.is_nan() || **s == f64::NEG_INFINITY) {
            return bad(format!("unusable SNR {s}"));
        }
        if self.seeds.is_empty() {
            return bad("the seed list is empty".into());
        }
        if self.n_train == 0 || self.n_test == 0 {
            return bad("need at least one training and one held-out view".into());
        }
        if self.prompt_view >= self.n_train + self.n_test && self.dataset.is_none() {
            return bad(format!("prompt view {} does not exist", self.prompt_view));
        }
        if self.dataset.is_some() && self.scene.is_none() {
            return bad("a loaded dataset needs its scene file".into());
        }
        if !(self.keep_rate > 0.0 && self.keep_rate <= 1.0) {
            return bad(format!("keep rate {} outside (0, 1]", self.keep_rate));
        }
        self.codec_config().validate()?;
        self.channel_model()?;
        self.pilot_block()?;
        if self.estimator.learned() && (self.grid_rows % 4 != 0 || self.grid_cols % 4 != 0) {
            return bad("learned estimators need grid sides divisible by 4".into());
        }
        for p in [&self.scene, &self.dataset, &self.field, &self.codec, &self.prompt_points].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::NotFound(format!("{} does not exist", p.display())));
            }
        }
        if let Some(stem) = &self.gdce {
            for ext in ["gen", "den"] {
                let p = stem.with_extension(ext);
                if !p.exists() {
                    return Err(Error::NotFound(format!("{} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the config, output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest[..8].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn channel_model(&self) -> Result<ChannelModel> {
        ChannelModel::parse(&self.channel, self.rician_k)
    }

    pub fn pilot_block(&self) -> Result<PilotBlock> {
        PilotBlock::regular(self.grid_rows, self.grid_cols, self.pilot_stride, self.pilot_seed)
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            width: self.width,
            height: self.height,
            n_train: self.n_train,
            n_test: self.n_test,
            samples_per_ray: self.samples_per_ray,
            seed: self.scene_seed,
            ..DatasetConfig::default()
        }
    }

    pub fn render_config(&self, scene: &SceneSpec) -> RenderConfig {
        RenderConfig { samples: self.render_samples, background: scene.background, ..RenderConfig::default() }
    }

    pub fn lift_config(&self) -> LiftConfig {
        LiftConfig {
            res: self.lift_res,
            iters: self.lift_iters,
            lambda: self.lift_lambda,
            seed: self.train_seed,
            ..LiftConfig::default()
        }
    }

    pub fn codec_config(&self) -> CodecConfig {
        CodecConfig { height: self.height, width: self.width, keep_rate: self.codec_keep_rate, ..CodecConfig::default() }
    }

    pub fn codec_train_config(&self) -> Result<CodecTrainConfig> {
        Ok(CodecTrainConfig {
            epochs: self.codec_epochs,
            channel: TrainChannel {
                model: self.channel_model()?,
                rows: self.grid_rows,
                cols: self.grid_cols,
                ..TrainChannel::default()
            },
            seed: self.train_seed,
            ..CodecTrainConfig::default()
        })
    }

    pub fn gdce_config(&self) -> Result<GdceConfig> {
        Ok(GdceConfig {
            rows: self.grid_rows,
            cols: self.grid_cols,
            pilot_stride: self.pilot_stride,
            pilot_seed: self.pilot_seed,
            channel: self.channel_model()?,
            gan: GanConfig { epochs: self.gan_epochs, ..GanConfig::default() },
            denoiser: DenoiserConfig { epochs: self.denoiser_epochs, ..DenoiserConfig::default() },
            seed: self.train_seed,
            ..GdceConfig::default()
        })
    }
}

/// Deterministic sub-seed for stream `tag`, item `idx` of a run seed.
pub fn sub_seed(seed: u64, tag: u64, idx: u64) -> u64 {
    // splitmix64 finalizer over a mixed key
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ idx.wrapping_mul(0xd6e8_feb8_6659_fd93).rotate_left(29);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stage<R>(name: &'static str, hash: &str, r: Result<R>) -> Result<R> {
    r.map_err(|e| Error::Stage { stage: name, config_hash: hash.to_string(), source: Box::new(e) })
}

// ---------------------------------------------------------------------------
// Stages

/// Scene and its multi-view dataset, synthesized or loaded.
pub fn scene_and_dataset<T: Scalar>(cfg: &RunConfig) -> Result<(SceneSpec, MultiViewDataset<T>)> {
    let scene = match &cfg.scene {
        Some(p) => scene_io::load_scene(p)?,
        None => scene_io::build_synthetic_scene(cfg.scene_seed, cfg.objects)?,
    };
    let dataset = match &cfg.dataset {
        Some(dir) => scene_io::load_dataset(dir)?,
        None => scene_io::build_dataset(&scene, &cfg.dataset_config())?,
    };
    if cfg.prompt_view >= dataset.views.len() {
        return Err(Error::InvalidArgument(format!("prompt view {} does not exist", cfg.prompt_view)));
    }
    Ok((scene, dataset))
}

/// Transmitter-side field: loaded from `cfg.field` or fitted to the training views.
pub fn transmitter_field<T: Scalar>(
    cfg: &RunConfig,
    scene: &SceneSpec,
    dataset: &MultiViewDataset<T>,
) -> Result<RadianceField<T>> {
    match &cfg.field {
        Some(p) => RadianceField::load_any(p),
        None => {
            let fit = FitConfig { epochs: cfg.field_epochs, seed: cfg.train_seed, ..FitConfig::default() };
            Ok(fit_radiance_field(dataset, &cfg.render_config(scene), &fit)?.0)
        }
    }
}

/// Turns the configured prompt into pixel points or text.
pub fn resolve_prompt<T: Scalar>(cfg: &RunConfig, dataset: &MultiViewDataset<T>) -> Result<Prompt> {
    let text = cfg.prompt.trim();
    if let Some(id) = text.strip_prefix("object:") {
        let id: u32 = id.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad object prompt '{text}'")))?;
        let masks = dataset
            .masks
            .get(&id)
            .ok_or_else(|| Error::NotFound(format!("no ground-truth mask for object {id}")))?;
        let point = central_pixel(&masks[cfg.prompt_view])
            .ok_or_else(|| Error::InvalidArgument(format!("object {id} is not visible in the prompt view")))?;
        return Ok(Prompt::Points { points: vec![point], label: format!("object {id}") });
    }
    if !text.is_empty() && text.chars().all(|c| c.is_ascii_digit() || ",; ".contains(c)) {
        let points = text
            .split(';')
            .filter(|s| !s.trim().is_empty())
            .map(|p| {
                let v: Vec<&str> = p.split(',').map(str::trim).collect();
                match v.as_slice() {
                    [r, c] => Ok((r.parse().unwrap_or(usize::MAX), c.parse().unwrap_or(usize::MAX))),
                    _ => Err(Error::InvalidArgument(format!("bad prompt point '{p}'"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(Prompt::Points { points, label: String::new() });
    }
    Ok(Prompt::Text(text.to_string()))
}

/// Mask pixel closest to the mask centroid.
fn central_pixel(mask: &Mask) -> Option<(usize, usize)> {
    let on: Vec<(usize, usize)> =
        (0..mask.height).flat_map(|r| (0..mask.width).map(move |c| (r, c))).filter(|&(r, c)| mask.get(r, c)).collect();
    if on.is_empty() {
        return None;
    }
    let n = on.len() as f64;
    let cr = on.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let cc = on.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let d = |p: &(usize, usize)| (p.0 as f64 - cr).powi(2) + (p.1 as f64 - cc).powi(2);
    on.into_iter().min_by(|a, b| d(a).total_cmp(&d(b)))
}

/// Segments the prompt view; the score is IoU against the oracle mask when one is known.
pub fn segment_prompt<T: Scalar>(cfg: &RunConfig, dataset: &MultiViewDataset<T>) -> Result<SegMask2D> {
    let prompt = resolve_prompt(cfg, dataset)?;
    let lookup = match &cfg.prompt_points {
        Some(p) => PointLookup::load(p)?,
        None => PointLookup::default(),
    };
    let gt = cfg
        .prompt
        .trim()
        .strip_prefix("object:")
        .and_then(|id| id.trim().parse::<u32>().ok())
        .and_then(|id| dataset.masks.get(&id))
        .map(|m| &m[cfg.prompt_view]);
    let image = &dataset.views[cfg.prompt_view].image;
    segment_with_prompt(image, &prompt, &RegionGrowing { tau: cfg.segment_tau }, &lookup, gt)
}

/// Codec loaded from `cfg.codec` or trained on object views of other scenes.
pub fn link_codec<T: Scalar>(cfg: &RunConfig) -> Result<SemanticCodec<T>> {
    let codec = match &cfg.codec {
        Some(p) => SemanticCodec::load(p)?,
        None => {
            let dcfg = DatasetConfig { samples_per_ray: 128, ..cfg.dataset_config() };
            let corpus = scene_io::object_view_corpus::<T>(
                cfg.codec_images,
                cfg.codec_corpus_seed,
                cfg.objects,
                cfg.codec_views_per_scene,
                &dcfg,
            )?;
            train_codec(&corpus, &cfg.codec_config(), &cfg.codec_train_config()?)?.0
        }
    };
    if codec.cfg.width != cfg.width || codec.cfg.height != cfg.height {
        return Err(Error::InvalidArgument(format!(
            "codec expects {}x{} images, the scene has {}x{}",
            codec.cfg.width, codec.cfg.height, cfg.width, cfg.height
        )));
    }
    Ok(codec)
}

/// Models behind the channel estimators, built on demand.
pub struct CsiModels<T: Scalar> {
    pub block: PilotBlock,
    pub prior: Option<ChannelPrior>,
    pub dictionary: Option<Dictionary>,
    pub band_dictionary: Option<Dictionary>,
    pub gdce: Option<GdceModels<T>>,
}

impl<T: Scalar> CsiModels<T> {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        Ok(Self { block: cfg.pilot_block()?, prior: None, dictionary: None, band_dictionary: None, gdce: None })
    }

    /// Builds whatever `est` needs and is not there yet.
    pub fn ensure(&mut self, cfg: &RunConfig, est: Estimator) -> Result<()> {
        let (rows, cols) = (cfg.grid_rows, cfg.grid_cols);
        match est {
            Estimator::True | Estimator::Ls => {}
            Estimator::Mmse if self.prior.is_none() => {
                let seed = sub_seed(cfg.train_seed, 5, 0);
                self.prior = Some(ChannelPrior::empirical(cfg.channel_model()?, rows, cols, cfg.prior_draws, seed)?);
            }
            Estimator::Omp if self.dictionary.is_none() => self.dictionary = Some(Dictionary::dft2(rows, cols)),
            Estimator::Amp if self.band_dictionary.is_none() => {
                self.band_dictionary = Some(Dictionary::dft2_band(rows, cols, 1))
            }
            Estimator::Cgan | Estimator::Gdce if self.gdce.is_none() => {
                self.gdce = Some(match &cfg.gdce {
                    Some(stem) => GdceModels::load(stem, self.block.clone())?,
                    None => train_gdce(&cfg.gdce_config()?)?,
                });
            }
            _ => {}
        }
        Ok(())
    }

    /// Estimate of `chan` from pilots observed at `snr_db`.
    pub fn estimate(&self, cfg: &RunConfig, est: Estimator, chan: &ChannelRealization, snr_db: f64, seed: u64) -> Result<ChannelRealization> {
        if est == Estimator::True {
            return Ok(chan.clone());
        }
        let block = &self.block;
        let y = observe_pilots(&chan.gains, block, snr_db, seed)?;
        let missing = || Error::InvalidArgument(format!("estimator {} was not prepared", est.name()));
        let h: CsiImage = match est {
            Estimator::True => unreachable!(),
            Estimator::Ls => ls_estimate(&y, block)?,
            Estimator::Mmse => {
                let sigma2 = if snr_db.is_finite() { noise_power_for_snr(1.0, snr_db) } else { 0.0 };
                mmse_estimate(&y, block, self.prior.as_ref().ok_or_else(missing)?, sigma2)?
            }
            Estimator::Omp => omp_estimate(&y, block, self.dictionary.as_ref().ok_or_else(missing)?, cfg.omp_atoms)?,
            Estimator::Amp => {
                amp_estimate(&y, block, self.band_dictionary.as_ref().ok_or_else(missing)?, cfg.amp_iters, cfg.amp_threshold)?
            }
            Estimator::Cgan => self.gdce.as_ref().ok_or_else(missing)?.gan.generate(&y, block)?,
            Estimator::Gdce => {
                self.gdce.as_ref().ok_or_else(missing)?.estimate(&y, sub_seed(seed, 1, 0), &RefineOptions::default())?.refined
            }
        };
        ChannelRealization::from_gains(chan.rows, chan.cols, h.to_complex())
    }
}

/// Everything the transmitter and receiver share across cells of a sweep.
pub struct LinkContext<T: Scalar> {
    pub config_hash: String,
    pub scene: SceneSpec,
    pub dataset: MultiViewDataset<T>,
    pub render: RenderConfig,
    pub field: RadianceField<T>,
    pub segmentation: SegMask2D,
    pub grid: MaskGrid,
    /// Extracted object view per dataset view, with its lifted mask.
    pub object_views: Vec<(Image<T>, Mask)>,
    pub codec: SemanticCodec<T>,
    pub csi: CsiModels<T>,
}

impl<T: Scalar> LinkContext<T> {
    /// Runs every transmitter-side stage once.
    pub fn prepare(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash();
        let (scene, dataset) = stage("scene", &hash, scene_and_dataset::<T>(cfg))?;
        let render = cfg.render_config(&scene);
        let field = stage("field", &hash, transmitter_field(cfg, &scene, &dataset))?;
        let segmentation = stage("prompt", &hash, segment_prompt(cfg, &dataset))?;
        let lift = cfg.lift_config();
        let camera = &dataset.views[cfg.prompt_view].camera;
        let (grid, _) = stage("lift", &hash, lift_mask_to_3d(&field, camera, &segmentation, scene.bounds, &render, &lift))?;
        let object_views = stage("lift", &hash, extract_object_views(&dataset, &field, &grid, &render, &lift))?;
        let codec = stage("codec", &hash, link_codec(cfg))?;
        let mut csi = stage("csi", &hash, CsiModels::new(cfg))?;
        stage("csi", &hash, csi.ensure(cfg, cfg.estimator))?;
        Ok(Self { config_hash: hash, scene, dataset, render, field, segmentation, grid, object_views, codec, csi })
    }

    /// One (SNR, seed) cell: transfer every object view, optionally refit a
    /// field at the receiver, and score the held-out poses.
    pub fn run_cell(&self, cfg: &RunConfig, snr_db: f64, seed: u64) -> Result<RunRow> {
        let hash = cfg.hash();
        let start = Instant::now();
        let keep_rate = match cfg.mode {
            CodecMode::Teacher => 1.0,
            CodecMode::Student => cfg.keep_rate,
        };
        let retuned;
        let codec = if cfg.mode == CodecMode::Student && cfg.keep_rate != self.codec.cfg.keep_rate {
            let mut c = self.codec.clone();
            c.cfg.keep_rate = cfg.keep_rate;
            retuned = c;
            &retuned
        } else {
            &self.codec
        };
        let model = stage("link", &hash, cfg.channel_model())?;
        let n = self.object_views.len();
        let block_len = if cfg.coherence_views == 0 { n } else { cfg.coherence_views };
        let mut received = Vec::with_capacity(n);
        let mut nmse = Vec::new();
        let mut payload_bits = 0u64;
        for (b, first) in (0..n).step_by(block_len).enumerate() {
            let chan = stage("link", &hash, draw_channel(model, cfg.grid_rows, cfg.grid_cols, sub_seed(seed, 1, b as u64)))?;
            let est = stage("estimate", &hash, self.csi.estimate(cfg, cfg.estimator, &chan, snr_db, sub_seed(seed, 2, b as u64)))?;
            if cfg.estimator != Estimator::True && has_variance(&chan) {
                nmse.push(stage("estimate", &hash, metrics::nmse_db(&chan.gains, &est.gains))?);
            }
            for v in first..(first + block_len).min(n) {
                let mut link = |x: &[f64]| {
                    let y = transmit(x, &chan, snr_db, sub_seed(seed, 3, v as u64))?;
                    equalize(&y, &est, EqualizeMode::Elementwise)
                };
                let out = stage("link", &hash, transfer_image(&self.object_views[v].0, codec, cfg.mode, &mut link))?;
                payload_bits = out.payload.kept_bits();
                received.push(out.image);
            }
        }
        let test = self.dataset.split_indices(Split::Test);
        let scored: Vec<Image<T>> = if cfg.rx_epochs > 0 {
            let views = received
                .into_iter()
                .zip(&self.dataset.views)
                .map(|(image, v)| View { image, camera: v.camera.clone(), split: v.split })
                .collect();
            let rx = MultiViewDataset { views, masks: Default::default() };
            let render = RenderConfig { background: [0.0; 3], ..self.render.clone() };
            let fit = FitConfig { epochs: cfg.rx_epochs, lr: cfg.rx_lr, seed: sub_seed(seed, 4, 0), ..FitConfig::default() };
            let (field, _) = stage("receiver", &hash, fit_radiance_field(&rx, &render, &fit))?;
            stage("receiver", &hash, test.iter().map(|&i| render_view(&field, &self.dataset.views[i].camera, &render)).collect())?
        } else {
            test.iter().map(|&i| received[i].clone()).collect()
        };
        let refs: Vec<&Image<T>> = test.iter().map(|&i| &self.object_views[i].0).collect();
        let mut report = stage("metrics", &hash, score_views(&refs, &scored, &self.scene))?;
        report.snr_db = snr_db;
        report.seed = seed;
        report.nmse_db = (!nmse.is_empty()).then(|| nmse.iter().sum::<f64>() / nmse.len() as f64);
        let wall = start.elapsed().as_secs_f64();
        Ok(RunRow {
            config_hash: hash,
            estimator: cfg.estimator,
            keep_rate,
            payload_bits,
            metrics: report,
            wall_s: cfg.timing.then_some(wall),
        })
    }
}

fn has_variance(chan: &ChannelRealization) -> bool {
    chan.gains.iter().any(|g| *g != chan.gains[0])
}

/// Mean pixel- and semantic-level scores of `test` against `reference`.
///
/// Captions come from the stub captioner; BLEU uses up to 4-grams with
/// smoothing. Perfect reconstructions keep their +∞ PSNR.
pub fn score_views<T: Scalar>(reference: &[&Image<T>], test: &[Image<T>], scene: &SceneSpec) -> Result<MetricReport> {
    if reference.len() != test.len() || reference.is_empty() {
        return Err(Error::invalid("need matching, nonempty reference and test views"));
    }
    let n = reference.len() as f64;
    let (mut psnr, mut ssim, mut bleu, mut cosine) = (0.0, 0.0, 0.0, 0.0);
    for (r, t) in reference.iter().zip(test) {
        psnr += metrics::psnr_images(r, t)?;
        ssim += metrics::ssim_images(r, t)?;
        let (cr, ct) = (metrics::caption_stub(r, scene), metrics::caption_stub(t, scene));
        bleu += metrics::bleu(&metrics::tokens(&cr), &metrics::tokens(&ct), 4, true)?;
        cosine += metrics::cosine_sim(&metrics::embed_stub(&cr), &metrics::embed_stub(&ct))?;
    }
    Ok(MetricReport {
        psnr_db: psnr / n,
        ssim: ssim / n,
        nmse_db: None,
        bleu: bleu / n,
        cosine: cosine / n,
        snr_db: f64::NAN,
        seed: 0,
        views: reference.len(),
    })
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub config_hash: String,
    pub estimator: Estimator,
    /// 1 in teacher mode.
    pub keep_rate: f64,
    /// Kept latent bits of one view, without mask and header.
    pub payload_bits: u64,
    pub metrics: MetricReport,
    /// Present only when the config asks for timing.
    pub wall_s: Option<f64>,
}

pub const CSV_HEADER: &str = "config_hash,seed,snr_db,estimator,keep_rate,payload_bits,psnr_db,ssim,nmse_db,bleu,cosine,wall_s";

impl RunRow {
    /// NMSE is blank for perfect CSI, `wall_s` blank unless timed.
    pub fn to_csv_row(&self) -> String {
        let m = &self.metrics;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.config_hash,
            m.seed,
            csv_float(m.snr_db),
            self.estimator.name(),
            csv_float(self.keep_rate),
            self.payload_bits,
            csv_float(m.psnr_db),
            csv_float(m.ssim),
            m.nmse_db.map(csv_float).unwrap_or_default(),
            csv_float(m.bleu),
            csv_float(m.cosine),
            self.wall_s.map(csv_float).unwrap_or_default()
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub config_hash: String,
    pub rows: Vec<RunRow>,
    pub wall_s: f64,
}

impl RunReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.to_csv_row());
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Runs every (seed, SNR) cell of `cfg` in seed-major order.
pub fn run_link<T: Scalar>(cfg: &RunConfig) -> Result<RunReport> {
    let start = Instant::now();
    let ctx = LinkContext::<T>::prepare(cfg)?;
    let rows = run_cells(&ctx, cfg)?;
    Ok(RunReport { config_hash: ctx.config_hash, rows, wall_s: start.elapsed().as_secs_f64() })
}

pub fn run_cells<T: Scalar>(ctx: &LinkContext<T>, cfg: &RunConfig) -> Result<Vec<RunRow>> {
    let mut rows = Vec::with_capacity(cfg.seeds.len() * cfg.snr_db.len());
    for &seed in &cfg.seeds {
        for &snr in &cfg.snr_db {
            rows.push(ctx.run_cell(cfg, snr, seed)?);
        }
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Snr,
    Estimator,
    KeepRate,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "snr" => Ok(Self::Snr),
            "estimator" => Ok(Self::Estimator),
            "keep_rate" => Ok(Self::KeepRate),
            other => Err(Error::InvalidArgument(format!("unknown sweep axis '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Snr => "snr",
            Self::Estimator => "estimator",
            Self::KeepRate => "keep_rate",
        }
    }
}

/// One config per axis value; the axis value replaces the config key.
pub fn sweep_configs(cfg: &RunConfig, axis: SweepAxis, values: &[String]) -> Result<Vec<RunConfig>> {
    if values.is_empty() {
        return Err(Error::invalid(format!("no values for sweep axis {}", axis.name())));
    }
    let float = |v: &str| {
        let v = v.trim();
        match v {
            "inf" | "+inf" => Ok(f64::INFINITY),
            _ => v.parse::<f64>().map_err(|_| Error::InvalidArgument(format!("bad {} value '{v}'", axis.name()))),
        }
    };
    let out = match axis {
        SweepAxis::Snr => {
            let snrs = values.iter().map(|v| float(v)).collect::<Result<Vec<_>>>()?;
            vec![RunConfig { snr_db: snrs, ..cfg.clone() }]
        }
        SweepAxis::Estimator => values
            .iter()
            .map(|v| Ok(RunConfig { estimator: Estimator::parse(v.trim())?, ..cfg.clone() }))
            .collect::<Result<_>>()?,
        SweepAxis::KeepRate => values
            .iter()
            .map(|v| Ok(RunConfig { keep_rate: float(v)?, mode: CodecMode::Student, ..cfg.clone() }))
            .collect::<Result<_>>()?,
    };
    for c in &out {
        c.validate()?;
    }
    Ok(out)
}

/// Runs `cfg` once per axis value, sharing every transmitter-side stage.
pub fn sweep<T: Scalar>(cfg: &RunConfig, axis: SweepAxis, values: &[String]) -> Result<RunReport> {
    let start = Instant::now();
    let configs = sweep_configs(cfg, axis, values)?;
    let mut ctx = LinkContext::<T>::prepare(cfg)?;
    let mut rows = Vec::new();
    for c in &configs {
        let hash = c.hash();
        stage("csi", &hash, ctx.csi.ensure(c, c.estimator))?;
        rows.extend(run_cells(&ctx, c)?);
    }
    Ok(RunReport { config_hash: ctx.config_hash, rows, wall_s: start.elapsed().as_secs_f64() })
}
