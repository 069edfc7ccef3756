use proptest::prelude::*;
use semcom3d::channel::C64;
use semcom3d::metrics::*;
use semcom3d::raster::Image;
use semcom3d::scene_io::build_synthetic_scene;

// two-pass window statistics, one window at a time
fn oracle_ssim(a: &[f64], b: &[f64], w: usize, h: usize, ch: usize, win: usize) -> f64 {
    let (c1, c2) = (1e-4, 9e-4);
    let mut vals = Vec::new();
    for k in 0..ch {
        for r0 in 0..=h - win {
            for c0 in 0..=w - win {
                let idx: Vec<usize> =
                    (r0..r0 + win).flat_map(|r| (c0..c0 + win).map(move |c| (r * w + c) * ch + k)).collect();
                let n = idx.len() as f64;
                let ma = idx.iter().map(|&i| a[i]).sum::<f64>() / n;
                let mb = idx.iter().map(|&i| b[i]).sum::<f64>() / n;
                let va = idx.iter().map(|&i| (a[i] - ma).powi(2)).sum::<f64>() / n;
                let vb = idx.iter().map(|&i| (b[i] - mb).powi(2)).sum::<f64>() / n;
                let cv = idx.iter().map(|&i| (a[i] - ma) * (b[i] - mb)).sum::<f64>() / n;
                vals.push((2.0 * ma * mb + c1) * (2.0 * cv + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)));
            }
        }
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

#[test]
fn frozen_values() {
    // computed once with an independent script
    let a = [0.1, 0.9, 0.4, 0.6];
    let b = [0.2, 0.7, 0.4, 0.5];
    assert!((ssim(&a, &b, 2, 2, 1, 2, 1e-4, 9e-4).unwrap() - 0.889_485_189_177_246).abs() < 1e-12);
    let h = [C64::new(1.0, 0.0), C64::new(0.0, 1.0), C64::new(-1.0, 0.0), C64::new(0.0, -1.0)];
    let e = [C64::new(1.1, 0.0), C64::new(0.0, 1.0), C64::new(-1.0, 0.0), C64::new(0.0, -0.9)];
    assert!((nmse_db(&h, &e).unwrap() - 10.0 * (0.005f64).log10()).abs() < 1e-12);
    assert!((bleu(&["a", "b", "c", "d"], &["a", "b", "c", "e"], 2, false).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
}

#[test]
fn sentinels_and_errors() {
    let h = [C64::new(1.0, 0.0), C64::new(2.0, 0.0)];
    assert_eq!(nmse_db(&h, &h).unwrap(), f64::NEG_INFINITY);
    assert!(nmse_db(&[C64::new(1.0, 0.0); 3], &[C64::new(0.0, 0.0); 3]).is_err());
    assert!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    assert!(bleu(&["a"], &["a"], 0, true).is_err());
    assert_eq!(bleu(&["a"], &[], 4, true).unwrap(), 0.0);
    assert_eq!(bleu(&["a", "b"], &["c", "d"], 1, false).unwrap(), 0.0);
    assert!(ssim(&[0.0; 4], &[0.0; 4], 2, 2, 1, 3, 1e-4, 9e-4).is_err());
    assert_eq!(csv_float(f64::INFINITY), "inf");
    assert_eq!(csv_float(f64::NEG_INFINITY), "-inf");
    assert_eq!(csv_float(0.5), "0.500000");
}

#[test]
fn short_identical_sentences_score_one() {
    assert_eq!(bleu(&["red", "box"], &["red", "box"], 4, true).unwrap(), 1.0);
}

#[test]
fn captions_are_deterministic_and_ordered() {
    let scene = build_synthetic_scene(0, 3).unwrap();
    let img = Image::<f64>::new(16, 16, vec![0.0; 16 * 16 * 3]).unwrap();
    let a = caption_stub(&img, &scene);
    assert_eq!(a, caption_stub(&img, &scene));
    let e = embed_stub(&a);
    assert_eq!(e.len(), EMBED_DIM);
    assert_eq!(e, embed_stub(&a));
}

proptest! {
    #[test]
    fn ssim_matches_oracle(seed in any::<u64>(), w in 3usize..7, h in 3usize..7, win in 1usize..4) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..w * h * 3).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..w * h * 3).map(|_| rng.gen()).collect();
        let s = ssim(&a, &b, w, h, 3, win, 1e-4, 9e-4).unwrap();
        prop_assert!((s - oracle_ssim(&a, &b, w, h, 3, win)).abs() < 1e-9);
        let t = ssim(&b, &a, w, h, 3, win, 1e-4, 9e-4).unwrap();
        prop_assert!((s - t).abs() < 1e-12);
        prop_assert!(s <= 1.0 + 1e-12 && s >= -1.0);
        prop_assert!((ssim(&a, &a, w, h, 3, win, 1e-4, 9e-4).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_falls_with_error(a in prop::collection::vec(0.0f64..1.0, 1..50), d in 0.001f64..0.5) {
        let b: Vec<f64> = a.iter().map(|x| x + d).collect();
        let c: Vec<f64> = a.iter().map(|x| x + 2.0 * d).collect();
        let (p1, p2) = (psnr(&a, &b, 1.0).unwrap(), psnr(&a, &c, 1.0).unwrap());
        prop_assert!(p1 > p2);
        prop_assert!((p1 - p2 - 20.0 * 2f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn bleu_is_bounded(r in prop::collection::vec(0u8..5, 1..12), hy in prop::collection::vec(0u8..5, 1..12), n in 1usize..5) {
        let words = ["a", "b", "c", "d", "e"];
        let r: Vec<&str> = r.iter().map(|&i| words[i as usize]).collect();
        let hy: Vec<&str> = hy.iter().map(|&i| words[i as usize]).collect();
        for smooth in [false, true] {
            let s = bleu(&r, &hy, n, smooth).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
        }
        if r.len() >= n {
            prop_assert!((bleu(&r, &r, n, false).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_is_scale_invariant(u in prop::collection::vec(-1.0f64..1.0, 2..16), k in 0.1f64..10.0) {
        prop_assume!(u.iter().any(|x| x.abs() > 1e-3));
        let v: Vec<f64> = u.iter().map(|x| x * k).collect();
        prop_assert!((cosine_sim(&u, &v).unwrap() - 1.0).abs() < 1e-12);
        let w: Vec<f64> = u.iter().map(|x| -x).collect();
        prop_assert!((cosine_sim(&u, &w).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn nmse_scales_with_error(re in prop::collection::vec(-2.0f64..2.0, 4..32), k in 0.01f64..1.0) {
        let h: Vec<C64> = re.iter().enumerate().map(|(i, &r)| C64::new(r, i as f64 * 0.1)).collect();
        let e1: Vec<C64> = h.iter().map(|v| v + C64::new(k, 0.0)).collect();
        let e2: Vec<C64> = h.iter().map(|v| v + C64::new(2.0 * k, 0.0)).collect();
        let gap = nmse_db(&h, &e2).unwrap() - nmse_db(&h, &e1).unwrap();
        prop_assert!((gap - 20.0 * 2f64.log10()).abs() < 1e-9);
    }
}
