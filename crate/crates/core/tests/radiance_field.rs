use proptest::prelude::*;
use semcom3d::radiance_field::*;
use semcom3d::raster::Image;
use semcom3d::scene_io::*;

fn small_arch() -> FieldArch {
    FieldArch { hidden_layers: 2, width: 16, pos_freqs: 3, dir_freqs: 1, color_width: 8, bound: 1.0 }
}

fn flat_dataset(rgb: [f32; 3]) -> MultiViewDataset<f32> {
    let cfg = DatasetConfig { width: 8, height: 8, n_train: 3, n_test: 1, ..DatasetConfig::default() };
    let views = camera_rig(&cfg)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, camera)| View { image: Image::filled(8, 8, rgb), camera, split: if i < 3 { Split::Train } else { Split::Test } })
        .collect();
    MultiViewDataset { views, masks: Default::default() }
}

#[test]
fn fitting_a_constant_image_lowers_the_loss() {
    let ds = flat_dataset([0.2, 0.6, 0.4]);
    let render = RenderConfig { samples: 16, ..RenderConfig::default() };
    let fit = FitConfig { arch: small_arch(), epochs: 30, lr: 1e-2, batch_rays: 64, seed: 1 };
    let (field, report) = fit_radiance_field(&ds, &render, &fit).unwrap();
    assert_eq!(report.epoch_losses.len(), 30);
    assert!(report.final_loss() < 0.25 * report.initial_loss, "{report:?}");
    let img: Image<f32> = render_view(&field, &ds.views[3].camera, &render).unwrap();
    let err = img.data.iter().zip(&ds.views[3].image.data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(err < 0.15, "{err}");
}

#[test]
fn zero_epochs_return_the_initial_field() {
    let ds = flat_dataset([0.5; 3]);
    let render = RenderConfig { samples: 8, ..RenderConfig::default() };
    let fit = FitConfig { arch: small_arch(), epochs: 0, seed: 5, ..FitConfig::default() };
    let (field, report) = fit_radiance_field(&ds, &render, &fit).unwrap();
    assert!(report.epoch_losses.is_empty());
    assert_eq!(field.params.checksum(), RadianceField::<f32>::new(small_arch(), 5).unwrap().params.checksum());
}

#[test]
fn fits_are_deterministic() {
    let ds = flat_dataset([0.1, 0.2, 0.3]);
    let render = RenderConfig { samples: 8, ..RenderConfig::default() };
    let fit = FitConfig { arch: small_arch(), epochs: 2, batch_rays: 32, seed: 2, ..FitConfig::default() };
    let a = fit_radiance_field(&ds, &render, &fit).unwrap();
    let b = fit_radiance_field(&ds, &render, &fit).unwrap();
    assert_eq!(a.0.params.checksum(), b.0.params.checksum());
    assert_eq!(a.1, b.1);
}

#[test]
fn dataset_without_training_views_is_rejected() {
    let mut ds = flat_dataset([0.5; 3]);
    for v in &mut ds.views {
        v.split = Split::Test;
    }
    assert!(fit_radiance_field(&ds, &RenderConfig::default(), &FitConfig::default()).is_err());
}

#[test]
fn precisions_agree() {
    let a = RadianceField::<f32>::new(small_arch(), 9).unwrap();
    let b = RadianceField::<f64>::new(small_arch(), 9).unwrap();
    let ray = Ray::new([0.0, 0.0, 4.0], [0.0, 0.0, -1.0], 0.0, f64::INFINITY).unwrap();
    let cfg = RenderConfig { samples: 32, ..RenderConfig::default() };
    let ra: RayRender<f32> = render_ray(&a, &ray, &cfg).unwrap();
    let rb: RayRender<f64> = render_ray(&b, &ray, &cfg).unwrap();
    for k in 0..3 {
        assert!((ra.color[k] as f64 - rb.color[k]).abs() < 1e-4);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn compositing_invariants(seed in 0u64..200, dx in -0.4f64..0.4, dy in -0.4f64..0.4, samples in 2usize..64, strat in any::<bool>()) {
        let field = RadianceField::<f64>::new(small_arch(), seed).unwrap();
        let n = (dx * dx + dy * dy + 1.0).sqrt();
        let ray = Ray::new([0.0, 0.0, 4.0], [dx / n, dy / n, -1.0 / n], 0.0, f64::INFINITY).unwrap();
        let cfg = RenderConfig { samples, stratified: strat, ..RenderConfig::default() };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let out = render_rays::<f64, _>(&field, &[ray], &cfg, Some(&mut rng)).unwrap().remove(0);
        prop_assert_eq!(out.weights.len(), samples);
        let mut trans = 1.0;
        for &w in &out.weights {
            prop_assert!(w >= 0.0 && w <= trans + 1e-12);
            trans -= w;
        }
        prop_assert!(trans >= -1e-12);
        prop_assert!(out.color.iter().all(|c| (0.0..=1.0).contains(c)));
    }

    #[test]
    fn denser_media_hide_more_background(a in 0.01f64..5.0, d in 0.01f64..5.0) {
        let ray = Ray::new([0.0; 3], [0.0, 0.0, 1.0], 0.0, f64::INFINITY).unwrap();
        let cfg = RenderConfig { samples: 64, background: [1.0; 3], ..RenderConfig::default() };
        let thin: RayRender<f64> = render_ray(&ConstantField { density: a, color: [0.0; 3] }, &ray, &cfg).unwrap();
        let thick: RayRender<f64> = render_ray(&ConstantField { density: a + d, color: [0.0; 3] }, &ray, &cfg).unwrap();
        prop_assert!(thick.color[0] < thin.color[0]);
    }
}
