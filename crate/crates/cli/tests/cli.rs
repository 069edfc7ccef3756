use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semcom3d"))
        .args(args)
        .env("SEMCOM3D_OUT_DIR", out)
        .output()
        .expect("binary runs")
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "snr_dB = [1.0]\n").unwrap();
    let o = run(&["run-link", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["run-link", "--set", "keep_rate=3"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_sweep_axis_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["sweep", "--axis", "bandwidth", "--values", "1,2"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["sweep", "--axis", "estimator", "--values", "ls,oracle"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["fit-nerf", "--set", "field=\"/nonexistent.ckpt\""], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn corrupt_checkpoint_is_a_stage_failure() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.ckpt");
    std::fs::write(&ckpt, b"junk").unwrap();
    let set = format!("field=\"{}\"", ckpt.display());
    let o = run(&["run-link", "--set", &set, "--set", "width=16", "--set", "height=16", "--set", "samples_per_ray=8"], dir.path());
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage field"));
}

#[test]
fn metrics_on_pngs() {
    let dir = tempfile::tempdir().unwrap();
    let img = semcom3d::raster::Image::<f64>::filled(8, 8, [0.25, 0.5, 0.75]);
    let a = dir.path().join("a.png");
    semcom3d::scene_io::save_png(&img, &a).unwrap();
    let o = run(&["metrics", a.to_str().unwrap(), a.to_str().unwrap()], dir.path());
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("psnr_db inf"), "{text}");
    assert!(text.contains("ssim 1.000000"), "{text}");
}

#[test]
fn gen_scene_writes_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = run(
        &[
            "gen-scene",
            "--out",
            out.to_str().unwrap(),
            "--set",
            "width=16",
            "--set",
            "height=8",
            "--set",
            "n_train=2",
            "--set",
            "n_test=1",
            "--set",
            "samples_per_ray=16",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ds = semcom3d::scene_io::load_dataset::<f32>(&out.join("dataset")).unwrap();
    assert_eq!((ds.views.len(), ds.width(), ds.height()), (3, 16, 8));
    semcom3d::scene_io::load_scene(&out.join("scene.json")).unwrap();
}
