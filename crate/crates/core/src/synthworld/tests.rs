use proptest::prelude::*;

use super::*;
use crate::geometry::{CameraRig, GridSpec};
use crate::nets::{Detection, TRAJ_DIM};

fn rig() -> CameraRig {
    CameraRig::surround(6, 64, 64, 75.0, 1.5).unwrap()
}

fn grid() -> GridSpec {
    GridSpec::new(64.0, 32).unwrap()
}

fn empty_scene(agents: Vec<Agent>) -> Scene {
    Scene {
        seed: 0,
        curvature: 0.0,
        lane: LaneBand {
            centerline: vec![],
            half_width: 2.0,
        },
        agents,
        lane_agents: vec![],
        ego_plan: vec![[0.0, 0.0]; HORIZON],
    }
}

fn car(x: f64, y: f64, motion: Motion) -> Agent {
    Agent {
        x,
        y,
        w: 1.8,
        l: 4.5,
        yaw: 0.0,
        motion,
    }
}

#[test]
fn same_seed_same_scene() {
    let p = WorldParams::default();
    assert_eq!(gen_scene(42, &p).unwrap(), gen_scene(42, &p).unwrap());
    assert_ne!(gen_scene(42, &p).unwrap(), gen_scene(43, &p).unwrap());
}

#[test]
fn zero_agent_range() {
    let p = WorldParams {
        min_agents: 0,
        max_agents: 0,
        ..WorldParams::default()
    };
    let s = gen_scene(5, &p).unwrap();
    assert!(s.agents.is_empty());
    let t = make_targets(&s, &grid(), HORIZON).unwrap();
    assert!(t.heatmap.iter().all(|&h| h == 0.0));
    assert!(t.agents.is_empty());
    // free lane: ego runs at full speed
    assert!((s.ego_plan[0][0] - 2.5).abs() < 1e-2);
}

#[test]
fn thousand_seeds_stay_inside_extent() {
    let p = WorldParams::default();
    let half = p.extent / 2.0;
    for seed in 0..1000 {
        let s = gen_scene(seed, &p).unwrap();
        assert!((p.min_agents..=p.max_agents).contains(&s.agents.len()));
        for (i, a) in s.agents.iter().enumerate() {
            for c in a.rect().corners() {
                assert!(c[0].abs() <= half && c[1].abs() <= half, "seed {seed}");
            }
            for b in &s.agents[i + 1..] {
                assert!(!a.rect().intersects(&b.rect()), "seed {seed} overlap");
            }
        }
        let w1 = s.ego_plan[0];
        assert!(w1[0].abs() <= half && w1[1].abs() <= half);
    }
}

#[test]
fn invalid_params_rejected() {
    let p = WorldParams {
        min_agents: 3,
        max_agents: 1,
        ..WorldParams::default()
    };
    assert!(matches!(gen_scene(0, &p), Err(WorldError::Params(_))));
}

#[test]
fn crowded_world_reports_placement_failure() {
    let p = WorldParams {
        min_agents: 200,
        max_agents: 200,
        extent: 24.0,
        ..WorldParams::default()
    };
    assert!(matches!(gen_scene(1, &p), Err(WorldError::Placement { attempts: 100, .. })));
}

#[test]
fn empty_scene_renders_background() {
    let imgs = rasterize_views(&empty_scene(vec![]), &rig());
    assert_eq!(imgs.len(), 6);
    assert!(imgs.iter().flatten().all(|&v| v == 0.0));
}

#[test]
fn agent_ahead_seen_only_by_front_camera() {
    let scene = empty_scene(vec![car(15.0, 0.0, Motion::ConstantVelocity { vx: 0.0, vy: 0.0 })]);
    let imgs = rasterize_views(&scene, &rig());
    assert!(imgs[0].iter().any(|&v| v > 0.0));
    for img in &imgs[1..] {
        assert!(img.iter().all(|&v| v == 0.0));
    }
    let peak = imgs[0].iter().copied().fold(0.0f32, f32::max);
    assert!(peak <= agent_intensity_at(12.75) + 1e-6);
    assert_eq!(imgs, rasterize_views(&scene, &rig()));
}

fn agent_intensity_at(d: f64) -> f32 {
    render::agent_intensity(d)
}

#[test]
fn generated_images_in_unit_range() {
    let s = gen_scene(9, &WorldParams::default()).unwrap();
    for img in rasterize_views(&s, &rig()) {
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn constant_velocity_rollout() {
    let a = car(0.0, 10.0, Motion::ConstantVelocity { vx: 1.0, vy: 0.0 });
    let s = empty_scene(vec![a]);
    let t = make_targets(&s, &grid(), HORIZON).unwrap();
    let expected = [0.5, 0.0, 1.0, 0.0, 1.5, 0.0, 2.0, 0.0, 2.5, 0.0, 3.0, 0.0];
    for (g, e) in t.agents[0].future.iter().zip(expected) {
        assert!((g - e).abs() < 1e-12);
    }
}

#[test]
fn center_agent_peak() {
    let g = grid();
    let (cx, cy) = g.cell_center(16, 16);
    let s = empty_scene(vec![car(cx, cy, Motion::ConstantVelocity { vx: 0.0, vy: 0.0 })]);
    let t = make_targets(&s, &g, HORIZON).unwrap();
    assert_eq!(t.heatmap[16 * 32 + 16], 1.0);
    assert_eq!(t.heatmap.iter().filter(|&&h| h == 1.0).count(), 1);
    assert_eq!(t.foreground, vec![16 * 32 + 16]);
    let cells = g.num_cells();
    assert_eq!(t.regression[2 * cells + 16 * 32 + 16], 1.8);
    assert_eq!(t.regression[5 * cells + 16 * 32 + 16], 1.0);
}

#[test]
fn horizon_must_be_six() {
    let s = empty_scene(vec![]);
    assert!(matches!(make_targets(&s, &grid(), 5), Err(WorldError::Horizon(5))));
}

#[test]
fn heatmap_one_peak_per_agent() {
    let g = grid();
    for seed in 0..50 {
        let s = gen_scene(seed, &WorldParams::default()).unwrap();
        let t = make_targets(&s, &g, HORIZON).unwrap();
        assert!(t.heatmap.iter().all(|h| (0.0..=1.0).contains(h)));
        let ones = t.heatmap.iter().filter(|&&h| h == 1.0).count();
        assert_eq!(ones, t.foreground.len());
        assert!(t.agents.iter().all(|a| a.future.iter().all(|v| v.is_finite())));
    }
}

#[test]
fn ego_stops_behind_stationary_lead() {
    let plan = ego_controller(0.0, &[(0, 8.0, 0.0)], 5.0);
    assert!(plan.iter().all(|w| w[0] <= 1.0 + 1e-12));
    let free = ego_controller(0.0, &[], 5.0);
    assert!((free[5][0] - 15.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn turn_rollout_preserves_speed(speed in 0.0f64..10.0, rate in -1.0f64..1.0, yaw in -3.0f64..3.0) {
        let a = Agent { yaw, ..car(1.0, -2.0, Motion::ConstantTurn { speed, yaw_rate: rate }) };
        let mut prev = (a.x, a.y);
        for p in a.rollout(HORIZON) {
            let step = (p.x - prev.0).hypot(p.y - prev.1);
            prop_assert!((step / DT - speed).abs() < 1e-9);
            prev = (p.x, p.y);
        }
    }

    #[test]
    fn derived_seeds_are_distinct(root in any::<u64>(), comp in 0u64..4) {
        let a = derive_seed(root, comp, 0);
        prop_assert_eq!(a, derive_seed(root, comp, 0));
        prop_assert_ne!(a, derive_seed(root, comp, 1));
        prop_assert_ne!(a, derive_seed(root, comp + 1, 0));
    }
}

fn random_cache(seed: u64) -> TeacherCache {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (c, r) = (3, 4);
    let mut v = |n: usize| (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect::<Vec<_>>();
    let samples = (0..3)
        .map(|i| TeacherSample {
            bev: v(c * r * r),
            heatmap: v(r * r),
            regression: v(8 * r * r),
            agents: (0..i)
                .map(|_| {
                    let d = Detection {
                        row: 1,
                        col: 2,
                        score: 0.7,
                        x: 1.0,
                        y: -1.0,
                        w: 2.0,
                        l: 4.0,
                        yaw: 0.1,
                        vx: 3.0,
                        vy: 0.0,
                    };
                    CachedAgent::new(&d, v(TRAJ_DIM))
                })
                .collect(),
            plan: v(TRAJ_DIM),
        })
        .collect();
    TeacherCache {
        bev_channels: c,
        resolution: r,
        horizon: HORIZON,
        samples,
    }
}

#[test]
fn cache_round_trip() {
    let cache = random_cache(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.cache");
    write_cache(&path, &cache).unwrap();
    let back = read_cache(&path).unwrap();
    assert_eq!(back, cache);
    assert_eq!(back.encode(), cache.encode());
    assert_eq!(back.samples[2].agents[1].detection().row, 2 - 1);
}

#[test]
fn cache_bad_magic() {
    let mut bytes = random_cache(1).encode();
    bytes[0] = b'X';
    let e = TeacherCache::decode(&bytes).unwrap_err();
    assert_eq!(e.offset, 0);
    assert!(e.to_string().contains("magic"));
}

#[test]
fn cache_dimension_mismatch() {
    let mut bytes = random_cache(1).encode();
    // declare 5 BEV channels where 3 were written
    bytes[16..20].copy_from_slice(&5u32.to_le_bytes());
    assert!(TeacherCache::decode(&bytes).is_err());
    let bytes = random_cache(1).encode();
    let e = TeacherCache::decode(&bytes[..bytes.len() - 2]).unwrap_err();
    assert!(e.offset > 0);
}

#[test]
fn manifest_round_trip_and_batching() {
    let p = WorldParams::default();
    let ds = Dataset::generate(7, 0, 3, &p, &rig(), &grid()).unwrap();
    let entries = parse_manifest(&ds.manifest()).unwrap();
    assert_eq!(entries.len(), 3);
    let again = Dataset::from_manifest(&entries, &p, &rig(), &grid()).unwrap();
    for (a, b) in ds.samples.iter().zip(&again.samples) {
        assert_eq!(a.images, b.images);
        assert_eq!(a.targets, b.targets);
    }
    let batch = ds.batch_images(&[2, 0]);
    assert_eq!(batch.shape(), &[1, 12, 64, 64]);
    assert_eq!(&batch.data()[..64 * 64], ds.samples[2].images[0].as_slice());
    let bad = vec![(entries[0].0, entries[0].1 + 1)];
    assert!(matches!(
        Dataset::from_manifest(&bad, &p, &rig(), &grid()),
        Err(WorldError::Manifest { line: 1, .. })
    ));
}

#[test]
fn manifest_parse_errors() {
    assert_eq!(parse_manifest("# c\n1,2\n\n3, 4\n").unwrap(), vec![(1, 2), (3, 4)]);
    assert!(matches!(parse_manifest("1,2\nx\n"), Err(WorldError::Manifest { line: 2, .. })));
}
