use proptest::prelude::*;
use semcom3d::channel::*;
use semcom3d::Error;

fn mean_power(model: ChannelModel) -> f64 {
    let mut s = 0.0;
    let mut n = 0;
    for seed in 0..200 {
        let h = draw_channel(model, 16, 16, seed).unwrap();
        s += h.gains.iter().map(|g| g.norm_sqr()).sum::<f64>();
        n += h.len();
    }
    s / n as f64
}

#[test]
fn fading_has_unit_average_power() {
    for m in [ChannelModel::Rayleigh, ChannelModel::Rician { k: 3.0 }, ChannelModel::Rician { k: 0.0 }] {
        let p = mean_power(m);
        assert!((p - 1.0).abs() < 0.02, "{m:?}: {p}");
    }
}

#[test]
fn rician_k_sets_los_fraction() {
    // block-constant LOS term: |mean gain|² = K/(K+1)
    let k = 3.0;
    let h = draw_channel(ChannelModel::Rician { k }, 64, 64, 9).unwrap();
    let mean = h.gains.iter().sum::<C64>() / h.len() as f64;
    assert!((mean.norm_sqr() - k / (k + 1.0)).abs() < 0.02);
}

#[test]
fn draws_are_seeded() {
    let a = draw_channel(ChannelModel::Rayleigh, 4, 4, 11).unwrap();
    assert_eq!(a, draw_channel(ChannelModel::Rayleigh, 4, 4, 11).unwrap());
    assert_ne!(a.gains, draw_channel(ChannelModel::Rayleigh, 4, 4, 12).unwrap().gains);
    let x = vec![0.5; 40];
    assert_eq!(transmit(&x, &a, 5.0, 1).unwrap(), transmit(&x, &a, 5.0, 1).unwrap());
    assert_ne!(transmit(&x, &a, 5.0, 1).unwrap(), transmit(&x, &a, 5.0, 2).unwrap());
}

#[test]
fn model_names_parse() {
    assert_eq!(ChannelModel::parse("awgn", 1.0).unwrap(), ChannelModel::Awgn);
    assert_eq!(ChannelModel::parse("rician", 2.0).unwrap(), ChannelModel::Rician { k: 2.0 });
    assert!(matches!(ChannelModel::parse("nakagami", 1.0), Err(Error::InvalidArgument(_))));
}

#[test]
fn bad_inputs_are_rejected() {
    let h = draw_channel(ChannelModel::Rayleigh, 2, 2, 0).unwrap();
    assert!(transmit(&[1.0, f64::NAN], &h, 10.0, 0).is_err());
    assert!(transmit(&[1.0, 0.0], &h, f64::NAN, 0).is_err());
    assert!(transmit(&[1.0, 0.0], &h, f64::NEG_INFINITY, 0).is_err());
    let dead = ChannelRealization::from_gains(1, 2, vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0)]).unwrap();
    assert!(matches!(equalize(&[1.0, 0.0, 1.0, 0.0], &dead, EqualizeMode::Elementwise), Err(Error::SingularChannel(_))));
    assert!(ChannelRealization::from_gains(2, 2, vec![C64::new(1.0, 0.0); 3]).is_err());
}

#[test]
fn rank_deficient_matrix_is_singular() {
    let mut h = draw_matrix_channel(ChannelModel::Rayleigh, 3, 0).unwrap();
    for c in 0..3 {
        h.gains[3 + c] = h.gains[c] * 2.0;
    }
    assert!(matches!(pseudo_inverse(&h.matrix()), Err(Error::SingularChannel(_))));
}

#[test]
fn matrix_layout_pads_whole_blocks() {
    let h = draw_matrix_channel(ChannelModel::Rayleigh, 4, 3).unwrap();
    let y = transmit(&[1.0; 10], &h, f64::INFINITY, 0).unwrap();
    assert_eq!(y.len(), 16);
    let back = equalize(&y, &h, EqualizeMode::PseudoInverse).unwrap();
    assert!(back[..10].iter().all(|v| (v - 1.0).abs() < 1e-9));
    assert!(back[10..].iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn snr_sets_post_equalization_error() {
    // unit channel: error power per real dimension is σ²/2
    let h = draw_channel(ChannelModel::Awgn, 1, 1, 0).unwrap();
    let x = vec![0.3; 200_000];
    let y = transmit(&x, &h, 10.0, 4).unwrap();
    let e = y.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64;
    assert!((e / 0.05 - 1.0).abs() < 0.02, "{e}");
}

proptest! {
    #[test]
    fn elementwise_round_trip(x in prop::collection::vec(-10.0f64..10.0, 1..300), seed in 0u64..1000, rows in 1usize..9, cols in 1usize..9) {
        let h = draw_channel(ChannelModel::Rician { k: 1.0 }, rows, cols, seed).unwrap();
        let y = transmit(&x, &h, f64::INFINITY, seed).unwrap();
        let back = equalize(&y, &h, EqualizeMode::Elementwise).unwrap();
        prop_assert_eq!(back.len(), x.len() + x.len() % 2);
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn pinv_round_trip(x in prop::collection::vec(-5.0f64..5.0, 1..200), seed in 0u64..1000, n in 1usize..7) {
        let h = draw_matrix_channel(ChannelModel::Rayleigh, n, seed).unwrap();
        let y = transmit(&x, &h, f64::INFINITY, 0).unwrap();
        let back = equalize(&y, &h, EqualizeMode::PseudoInverse).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-6, "{} vs {}", a, b);
        }
    }

    #[test]
    fn frame_mapping_round_trip(x in prop::collection::vec(-1e3f64..1e3, 0..64)) {
        let m = FrameMapping::new(x.len());
        let s = m.to_symbols(&x);
        prop_assert_eq!(s.len(), m.symbols());
        prop_assert_eq!(m.from_symbols(&s), x);
    }

    #[test]
    fn noise_power_is_monotone(a in -30.0f64..40.0, d in 0.01f64..20.0) {
        prop_assert!(noise_power_for_snr(1.0, a + d) < noise_power_for_snr(1.0, a));
        prop_assert!((noise_power_for_snr(2.0, a) - 2.0 * noise_power_for_snr(1.0, a)).abs() < 1e-9 * noise_power_for_snr(2.0, a));
    }
}
