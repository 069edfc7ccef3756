use std::sync::OnceLock;

use proptest::prelude::*;
use semcom3d::geometry::Vec3;
use semcom3d::object_lifter::*;
use semcom3d::radiance_field::{cast_ray, RenderConfig, VolumeField};
use semcom3d::raster::Mask;
use semcom3d::scene_io::*;
use semcom3d::Result;

/// The scene itself as a volume, standing in for a perfectly trained field.
struct Analytic(SceneSpec);

impl VolumeField<f64> for Analytic {
    fn query(&self, points: &[Vec3], _dirs: &[Vec3]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut d = Vec::with_capacity(points.len());
        let mut c = Vec::with_capacity(3 * points.len());
        for &p in points {
            let (s, rgb) = self.0.sample(p);
            d.push(s);
            c.extend(rgb);
        }
        Ok((d, c))
    }
}

struct Setup {
    field: Analytic,
    dataset: MultiViewDataset<f64>,
    render: RenderConfig,
    cfg: LiftConfig,
}

fn setup() -> &'static Setup {
    static S: OnceLock<Setup> = OnceLock::new();
    S.get_or_init(|| {
        let scene = build_synthetic_scene(0, 3).unwrap();
        let dcfg = DatasetConfig { width: 64, height: 64, n_train: 6, n_test: 2, samples_per_ray: 64, ..DatasetConfig::default() };
        let dataset = build_dataset(&scene, &dcfg).unwrap();
        let render = RenderConfig { samples: 48, background: scene.background, ..RenderConfig::default() };
        let cfg = LiftConfig::default();
        Setup { field: Analytic(scene), dataset, render, cfg }
    })
}

fn lift(mask: Mask, cfg: &LiftConfig) -> (MaskGrid, LiftReport) {
    let s = setup();
    let seg = SegMask2D { mask, iou_score: 1.0, label: String::new() };
    lift_mask_to_3d(&s.field, &s.dataset.views[0].camera, &seg, s.field.0.bounds, &s.render, cfg).unwrap()
}

fn sphere_grid() -> &'static (MaskGrid, LiftReport) {
    static G: OnceLock<(MaskGrid, LiftReport)> = OnceLock::new();
    G.get_or_init(|| lift(setup().dataset.masks[&1][0].clone(), &setup().cfg))
}

#[test]
fn lifted_sphere_matches_every_view() {
    let s = setup();
    let (grid, _) = sphere_grid();
    let views = extract_object_views(&s.dataset, &s.field, grid, &s.render, &s.cfg).unwrap();
    for (i, (_, m)) in views.iter().enumerate() {
        let iou = m.iou(&s.dataset.masks[&1][i]);
        assert!(iou >= 0.8, "view {i}: {iou}");
    }
}

#[test]
fn confidences_stay_in_unit_range_and_loss_drops() {
    let (grid, report) = sphere_grid();
    assert!(grid.data.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(grid.data.iter().any(|&v| v > 0.5));
    assert_eq!(report.losses.len(), setup().cfg.iters);
    // starts from zero, so any useful step makes the loss negative
    assert!(report.losses[0] < 0.0);
    assert!(report.losses.last().unwrap() < &report.losses[0]);
}

#[test]
fn visible_shell_is_lifted() {
    // voxels behind the prompt view's first hit get no gradient; score the hit points
    let s = setup();
    let (grid, _) = sphere_grid();
    let cam = &s.dataset.views[0].camera;
    let prim = s.field.0.object(1).unwrap();
    let (mut hits, mut on) = (0, 0);
    for r in 0..cam.height {
        for c in 0..cam.width {
            let ray = cast_ray(cam, r, c).unwrap();
            if let Some((t, 1)) = s.field.0.first_hit(ray.origin, ray.dir) {
                hits += 1;
                if grid.sample(ray.at(t + 0.02)) >= 0.5 {
                    on += 1;
                }
            }
        }
    }
    assert!(hits > 20);
    assert!(on as f64 >= 0.9 * hits as f64, "{on}/{hits}");
    // nothing far from the object lights up
    let reach = prim.bounding_radius() + 2.0 * 2.0 / (s.cfg.res - 1) as f64 * 3f64.sqrt();
    let [nx, ny, nz] = grid.res;
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                if grid.data[grid.index(i, j, k)] >= 0.5 {
                    let v = grid.vertex(i, j, k);
                    let d = (0..3).map(|a| (v[a] - prim.center[a]).powi(2)).sum::<f64>().sqrt();
                    assert!(d <= reach, "voxel at {v:?} is {d} from the centre");
                }
            }
        }
    }
}

#[test]
fn empty_mask_is_a_fixed_point() {
    let s = setup();
    let (grid, report) = lift(Mask::empty(64, 64), &LiftConfig { iters: 10, ..s.cfg.clone() });
    assert!(grid.data.iter().all(|&v| v == 0.0));
    assert!(report.losses.iter().all(|&l| l == 0.0));
}

#[test]
fn zero_iterations_return_zero_grid() {
    let s = setup();
    let (grid, report) = lift(s.dataset.masks[&1][0].clone(), &LiftConfig { iters: 0, ..s.cfg.clone() });
    assert!(grid.data.iter().all(|&v| v == 0.0));
    assert!(report.losses.is_empty());
    assert_eq!(grid.res, [s.cfg.res; 3]);
}

#[test]
fn lifting_is_deterministic() {
    let s = setup();
    let cfg = LiftConfig { iters: 5, ..s.cfg.clone() };
    let a = lift(s.dataset.masks[&2][0].clone(), &cfg);
    let b = lift(s.dataset.masks[&2][0].clone(), &cfg);
    assert_eq!(a.0, b.0);
}

#[test]
fn bad_inputs_are_rejected() {
    let s = setup();
    let cam = &s.dataset.views[0].camera;
    let seg = SegMask2D { mask: Mask::empty(8, 8), iou_score: 1.0, label: String::new() };
    assert!(lift_mask_to_3d(&s.field, cam, &seg, s.field.0.bounds, &s.render, &s.cfg).is_err());
    let seg = SegMask2D { mask: Mask::empty(64, 64), iou_score: 1.0, label: String::new() };
    let neg = LiftConfig { lambda: -0.1, ..s.cfg.clone() };
    assert!(lift_mask_to_3d(&s.field, cam, &seg, s.field.0.bounds, &s.render, &neg).is_err());
}

#[test]
fn region_growing_recovers_a_scene_object() {
    let s = setup();
    let gt = &s.dataset.masks[&1][0];
    let (r, c) = (0..64 * 64).map(|i| (i / 64, i % 64)).find(|&(r, c)| gt.get(r, c)).unwrap();
    // first pixel is an edge pixel; step one row down into the interior
    let prompt = Prompt::Points { points: vec![(r + 1, c)], label: "object".into() };
    let seg = segment_with_prompt(&s.dataset.views[0].image, &prompt, &RegionGrowing::default(), &PointLookup::default(), Some(gt)).unwrap();
    assert!(seg.iou_score >= 0.8, "{}", seg.iou_score);
}

proptest! {
    #[test]
    fn projection_loss_is_linear(m in prop::collection::vec((any::<bool>(), 0.0f64..1.0), 1..40), lambda in 0.0f64..1.0, k in 0.0f64..3.0) {
        let (s, u): (Vec<bool>, Vec<f64>) = m.into_iter().unzip();
        let scaled: Vec<f64> = u.iter().map(|x| x * k).collect();
        let a = mask_projection_loss(&s, &u, lambda).unwrap();
        let b = mask_projection_loss(&s, &scaled, lambda).unwrap();
        prop_assert!((b - k * a).abs() < 1e-9);
        // inside pixels pull the loss down, outside pixels push it up
        let inside: f64 = s.iter().zip(&u).filter(|p| *p.0).map(|p| p.1).sum();
        prop_assert!(a >= -inside - 1e-12);
    }

    #[test]
    fn grid_samples_stay_in_range(v in prop::collection::vec(0.0f64..1.0, 27), p in prop::array::uniform3(-1.5f64..1.5)) {
        let mut g = MaskGrid::zeros([3, 3, 3], Aabb { lo: [-1.0; 3], hi: [1.0; 3] }).unwrap();
        g.data = v;
        let x = g.sample(p);
        prop_assert!((0.0..=1.0).contains(&x));
    }
}
