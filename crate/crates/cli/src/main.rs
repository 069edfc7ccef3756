use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use semcom3d::csi_estimation::train_gdce;
use semcom3d::metrics;
use semcom3d::object_lifter::extract_object_views;
use semcom3d::pipeline::{self, RunConfig, SweepAxis};
use semcom3d::radiance_field::render_view;
use semcom3d::raster::Image;
use semcom3d::scene_io::{self, Split};
use semcom3d::{Error, Result};

type F = f32;

#[derive(Parser, Debug)]
#[command(name = "semcom3d", version, about = "3D semantic communication link at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat TOML run configuration
    #[arg(short, long)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set snr_db=[0,10]` or `--set estimator=gdce`
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Output directory (beats the config and the environment)
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Render the synthetic scene and write scene.json plus dataset/
    GenScene(Common),
    /// Fit the transmitter radiance field; writes field.ckpt
    FitNerf(Common),
    /// Segment the prompt view and lift it to 3D; writes mask.grid and objects/
    LiftMask(Common),
    /// Train the semantic codec; writes codec.ckpt
    TrainCodec(Common),
    /// Train the two-stage channel estimator; writes gdce.gen/.critic/.den
    TrainGdce(Common),
    /// Run every (seed, SNR) cell; writes run_link.csv
    RunLink(Common),
    /// Sweep one axis; writes sweep_<axis>.csv
    Sweep {
        #[command(flatten)]
        common: Common,
        /// snr | estimator | keep_rate
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        values: Vec<String>,
    },
    /// Compare two PNGs: PSNR, SSIM and, given a scene, caption BLEU/cosine
    Metrics {
        reference: PathBuf,
        test: PathBuf,
        #[arg(long)]
        scene: Option<PathBuf>,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_STAGE: u8 = 4;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = match &cli.cmd {
        Cmd::GenScene(c)
        | Cmd::FitNerf(c)
        | Cmd::LiftMask(c)
        | Cmd::TrainCodec(c)
        | Cmd::TrainGdce(c)
        | Cmd::RunLink(c)
        | Cmd::Sweep { common: c, .. } => Some(c),
        Cmd::Metrics { .. } => None,
    };
    let cfg = match common.map(load_config).transpose() {
        Ok(c) => c.unwrap_or_default(),
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Cmd::Sweep { axis, values, .. } = &cli.cmd {
        if let Err(e) = SweepAxis::parse(axis).and_then(|a| pipeline::sweep_configs(&cfg, a, values)) {
            eprintln!("config error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    match run(&cli.cmd, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e.root() {
                Error::Divergence { .. } => ExitCode::from(EXIT_DIVERGED),
                _ => ExitCode::from(EXIT_STAGE),
            }
        }
    }
}

/// File, then `--set` overrides, then the environment, then `--out`.
fn load_config(c: &Common) -> Result<RunConfig> {
    let text = match &c.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|e| Error::InvalidArgument(format!("bad config: {e}")))?;
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        // bare words are strings; anything TOML can parse keeps its type
        let value = toml::from_str::<toml::Table>(&format!("v = {v}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(v.to_string()));
        table.insert(k.trim().to_string(), value);
    }
    let mut cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::InvalidArgument(format!("bad config: {e}")))?;
    cfg.apply_env();
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_path(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::InvalidArgument(format!("{}: {e}", cfg.out_dir.display())))?;
    Ok(cfg.out_dir.join(name))
}

fn run(cmd: &Cmd, cfg: &RunConfig) -> Result<()> {
    match cmd {
        Cmd::GenScene(_) => {
            let (scene, dataset) = pipeline::scene_and_dataset::<F>(cfg)?;
            scene_io::save_scene(&scene, &out_path(cfg, "scene.json")?)?;
            let dir = out_path(cfg, "dataset")?;
            scene_io::save_dataset(&dataset, &dir)?;
            println!("{} objects, {} views -> {}", scene.primitives.len(), dataset.views.len(), dir.display());
        }
        Cmd::FitNerf(_) => {
            let (scene, dataset) = pipeline::scene_and_dataset::<F>(cfg)?;
            let field = pipeline::transmitter_field(cfg, &scene, &dataset)?;
            let path = out_path(cfg, "field.ckpt")?;
            field.save(&path)?;
            let render = cfg.render_config(&scene);
            for i in dataset.split_indices(Split::Test) {
                let img: Image<F> = render_view(&field, &dataset.views[i].camera, &render)?;
                println!("view {i}: held-out psnr {:.2} dB", metrics::psnr_images(&img, &dataset.views[i].image)?);
            }
            println!("field -> {}", path.display());
        }
        Cmd::LiftMask(_) => {
            let (scene, dataset) = pipeline::scene_and_dataset::<F>(cfg)?;
            let field = pipeline::transmitter_field(cfg, &scene, &dataset)?;
            let seg = pipeline::segment_prompt(cfg, &dataset)?;
            println!("prompt view {}: segmentation score {:.3}", cfg.prompt_view, seg.iou_score);
            let render = cfg.render_config(&scene);
            let lift = cfg.lift_config();
            let cam = &dataset.views[cfg.prompt_view].camera;
            let (grid, report) = semcom3d::object_lifter::lift_mask_to_3d(&field, cam, &seg, scene.bounds, &render, &lift)?;
            println!("final projection loss {:.4}", report.losses.last().copied().unwrap_or(0.0));
            grid.save(&out_path(cfg, "mask.grid")?)?;
            let dir = out_path(cfg, "objects")?;
            std::fs::create_dir_all(&dir).map_err(|e| Error::InvalidArgument(format!("{}: {e}", dir.display())))?;
            let oracle = cfg
                .prompt
                .strip_prefix("object:")
                .and_then(|s| s.trim().parse::<u32>().ok())
                .and_then(|id| dataset.masks.get(&id));
            for (i, (img, mask)) in extract_object_views(&dataset, &field, &grid, &render, &lift)?.iter().enumerate() {
                scene_io::save_png(img, &dir.join(format!("view_{i:04}.png")))?;
                if let Some(gt) = oracle {
                    println!("view {i}: iou {:.3}", mask.iou(&gt[i]));
                }
            }
        }
        Cmd::TrainCodec(_) => {
            let codec = pipeline::link_codec::<F>(cfg)?;
            let path = out_path(cfg, "codec.ckpt")?;
            codec.save(&path)?;
            println!("codec -> {}", path.display());
        }
        Cmd::TrainGdce(_) => {
            let models = train_gdce::<F>(&cfg.gdce_config()?)?;
            let stem = out_path(cfg, "gdce")?;
            models.save(&stem)?;
            println!(
                "final losses: critic {:.4}, generator {:.4}, denoiser {:.6}",
                models.gan_report.d_losses.last().copied().unwrap_or(f64::NAN),
                models.gan_report.g_losses.last().copied().unwrap_or(f64::NAN),
                models.denoiser_report.losses.last().copied().unwrap_or(f64::NAN)
            );
            println!("gdce -> {}.{{gen,critic,den}}", stem.display());
        }
        Cmd::RunLink(_) => {
            let report = pipeline::run_link::<F>(cfg)?;
            finish(&report, &out_path(cfg, "run_link.csv")?)?;
        }
        Cmd::Sweep { axis, values, .. } => {
            let axis = SweepAxis::parse(axis)?;
            let report = pipeline::sweep::<F>(cfg, axis, values)?;
            finish(&report, &out_path(cfg, &format!("sweep_{}.csv", axis.name()))?)?;
        }
        Cmd::Metrics { reference, test, scene } => {
            let a: Image<f64> = scene_io::load_png(reference)?;
            let b: Image<f64> = scene_io::load_png(test)?;
            println!("psnr_db {}", metrics::csv_float(metrics::psnr_images(&a, &b)?));
            println!("ssim {}", metrics::csv_float(metrics::ssim_images(&a, &b)?));
            if let Some(p) = scene {
                let scene = scene_io::load_scene(p)?;
                let r = pipeline::score_views(&[&a], &[b], &scene)?;
                println!("bleu {}", metrics::csv_float(r.bleu));
                println!("cosine {}", metrics::csv_float(r.cosine));
            }
        }
    }
    Ok(())
}

fn finish(report: &pipeline::RunReport, path: &Path) -> Result<()> {
    report.write_csv(path)?;
    print!("{}", report.to_csv());
    eprintln!("{} rows in {:.1} s -> {}", report.rows.len(), report.wall_s, path.display());
    Ok(())
}
