use proptest::prelude::*;

use super::*;
use crate::geometry::LaneBand;
use crate::synthworld::{Agent, Motion};

fn pred(scene: usize, x: f64, y: f64, score: f64) -> ScoredCenter {
    ScoredCenter { scene, x, y, score }
}

fn gt(scene: usize, x: f64, y: f64) -> GtCenter {
    GtCenter { scene, x, y }
}

fn scene(agents: Vec<Agent>) -> Scene {
    Scene {
        seed: 0,
        curvature: 0.0,
        lane: LaneBand {
            centerline: vec![],
            half_width: 2.0,
        },
        agents,
        lane_agents: vec![],
        ego_plan: vec![],
    }
}

fn static_car(x: f64, y: f64) -> Agent {
    Agent {
        x,
        y,
        w: 1.8,
        l: 4.5,
        yaw: 0.0,
        motion: Motion::ConstantVelocity { vx: 0.0, vy: 0.0 },
    }
}

fn straight_plan(step: f64) -> Vec<f64> {
    (1..=6).flat_map(|t| [t as f64 * step, 0.0]).collect()
}

#[test]
fn map_hand_values() {
    let g = [gt(0, 10.0, 5.0)];
    assert_eq!(map_score(&[pred(0, 10.3, 5.0, 0.1)], &g, &MAP_THRESHOLDS), Some(1.0));
    assert_eq!(map_score(&[], &g, &MAP_THRESHOLDS), Some(0.0));
    assert_eq!(map_score(&[pred(0, 13.0, 5.0, 0.9)], &g, &MAP_THRESHOLDS), Some(0.25));
    assert_eq!(map_score(&[pred(0, 1.0, 1.0, 0.9)], &[], &MAP_THRESHOLDS), None);
    // wrong scene never matches
    assert_eq!(map_score(&[pred(1, 10.0, 5.0, 0.9)], &g, &MAP_THRESHOLDS), Some(0.0));
}

#[test]
fn ap_interpolates_precision_envelope() {
    // ranks: TP, FP, TP over two GTs -> recall 0.5 at p=1, recall 1 at p=2/3
    let g = [gt(0, 0.0, 0.0), gt(0, 10.0, 0.0)];
    let p = [pred(0, 0.0, 0.0, 0.9), pred(0, 30.0, 0.0, 0.8), pred(0, 10.0, 0.0, 0.7)];
    let ap = average_precision(&p, &g, 1.0).unwrap();
    assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    // duplicate detections of one object: the second is a false positive
    let p = [pred(0, 0.0, 0.0, 0.9), pred(0, 0.1, 0.0, 0.8)];
    assert!((average_precision(&p, &g, 1.0).unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn ade_and_l2_hand_values() {
    let g = straight_plan(1.0);
    assert_eq!(min_ade(&[&g], &g).unwrap(), 0.0);
    let shifted: Vec<f64> = g.iter().enumerate().map(|(i, v)| if i % 2 == 0 { v + 1.0 } else { *v }).collect();
    assert!((min_ade(&[&shifted], &g).unwrap() - 1.0).abs() < 1e-12);
    let growing: Vec<f64> = (1..=6).flat_map(|t| [0.5 * t as f64, 0.0]).collect();
    let zero = vec![0.0; 12];
    assert!((min_ade(&[&growing], &zero).unwrap() - 1.75).abs() < 1e-12);
    assert!((min_ade(&[&growing, &zero], &zero).unwrap()).abs() < 1e-12);
    assert!(matches!(min_ade(&[&g[..10]], &g), Err(MetricError::Horizon { .. })));

    assert_eq!(l2_at_horizon(&g, &g, 6).unwrap(), 0.0);
    let mut a = vec![0.0; 12];
    a[10] = 3.0;
    assert_eq!(l2_at_horizon(&a, &zero, 6).unwrap(), 3.0);
    let mut b = zero.clone();
    b[..10].copy_from_slice(&[5.0; 10]);
    assert_eq!(l2_at_horizon(&b, &zero, 6).unwrap(), 0.0);
    assert!(matches!(l2_at_horizon(&a[..10], &zero, 6), Err(MetricError::Short { .. })));
}

#[test]
fn collision_cases() {
    let plan = straight_plan(2.0);
    let hit = scene(vec![static_car(6.0, 0.0)]);
    let empty = scene(vec![]);
    assert_eq!(collision_rate(&[plan.clone()], &[hit.clone()], EGO_WIDTH, EGO_LENGTH).unwrap(), 1.0);
    assert_eq!(collision_rate(&[plan.clone()], &[empty.clone()], EGO_WIDTH, EGO_LENGTH).unwrap(), 0.0);
    let two = collision_rate(&[plan.clone(), plan.clone()], &[hit, empty], EGO_WIDTH, EGO_LENGTH).unwrap();
    assert_eq!(two, 0.5);
    // agent 10 m to the side: half-diagonals sum to ~4.85 m < 10 m at every step
    let far = scene(vec![static_car(6.0, 10.0)]);
    assert_eq!(collision_rate(&[plan.clone()], &[far], EGO_WIDTH, EGO_LENGTH).unwrap(), 0.0);
    assert!(matches!(collision_rate(&[], &[], EGO_WIDTH, EGO_LENGTH), Err(MetricError::NoScenes)));
}

#[test]
fn footprint_heading_follows_segments() {
    let mut plan = vec![0.0, 1.0, 0.0, 1.0];
    plan.extend([0.0; 8]);
    let fp = ego_footprints(&plan, 1.0, 2.0);
    assert!((fp[0].yaw - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    // zero-length segment keeps the previous heading
    assert!((fp[1].yaw - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    assert!((fp[2].yaw + std::f64::consts::FRAC_PI_2).abs() < 1e-12);
}

#[test]
fn relative_change_values() {
    assert!((relative_change(39.0, 31.0, Direction::HigherBetter).unwrap() - 25.806).abs() < 0.01);
    assert!((relative_change(0.32, 0.48, Direction::LowerBetter).unwrap() - 33.333).abs() < 0.01);
    assert_eq!(relative_change(2.0, 2.0, Direction::LowerBetter).unwrap(), 0.0);
    assert!(matches!(relative_change(1.0, 0.0, Direction::HigherBetter), Err(MetricError::ZeroBaseline)));
}

#[test]
fn report_from_table_values() {
    let csv = "variant,map,min_ade,l2_at_3s,collision_rate\n\
               S0,31.0,1.00,1.43,0.48\nS1,38.0,0.85,1.40,0.45\n\
               S2,31.0,0.82,1.22,0.39\nS3,39.0,0.78,1.08,0.32\n";
    let r = AblationReport::from_csv(csv).unwrap();
    assert_eq!(r.row("S0").unwrap().relative, [0.0; 4]);
    let s3 = r.row("s3").unwrap().relative;
    for (got, want) in s3.iter().zip([25.8, 22.0, 24.5, 33.3]) {
        assert!((got - want).abs() <= 0.1, "{got} vs {want}");
    }
    let again = AblationReport::from_csv(&r.to_csv()).unwrap();
    assert_eq!(again.to_csv(), r.to_csv());
    assert!(r.to_csv().starts_with(CSV_HEADER));
    assert!(matches!(AblationReport::from_csv("variant,map\nS0,1\n"), Err(MetricError::Csv { .. })));
}

proptest! {
    #[test]
    fn map_depends_only_on_ranking(
        pts in proptest::collection::vec((0usize..3, -8.0f64..8.0, -8.0f64..8.0, 0.0f64..1.0), 1..12),
        gts in proptest::collection::vec((0usize..3, -8.0f64..8.0, -8.0f64..8.0), 1..8),
    ) {
        let p: Vec<_> = pts.iter().map(|&(s, x, y, c)| pred(s, x, y, c)).collect();
        let q: Vec<_> = p.iter().map(|c| ScoredCenter { score: (3.0 * c.score).exp() - 7.0, ..*c }).collect();
        let g: Vec<_> = gts.iter().map(|&(s, x, y)| gt(s, x, y)).collect();
        let a = map_score(&p, &g, &MAP_THRESHOLDS).unwrap();
        prop_assert_eq!(a, map_score(&q, &g, &MAP_THRESHOLDS).unwrap());
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn ade_and_l2_translation_invariant(
        a in proptest::collection::vec(-10.0f64..10.0, 12),
        b in proptest::collection::vec(-10.0f64..10.0, 12),
        dx in -50.0f64..50.0, dy in -50.0f64..50.0,
    ) {
        let shift = |v: &[f64]| v.iter().enumerate().map(|(i, x)| x + if i % 2 == 0 { dx } else { dy }).collect::<Vec<_>>();
        let (sa, sb) = (shift(&a), shift(&b));
        prop_assert!((min_ade(&[&a], &b).unwrap() - min_ade(&[&sa], &sb).unwrap()).abs() < 1e-9);
        prop_assert!((l2_at_horizon(&a, &b, 6).unwrap() - l2_at_horizon(&sa, &sb, 6).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn adding_agent_never_removes_collision(
        agents in proptest::collection::vec((-20.0f64..20.0, -20.0f64..20.0), 0..4),
        extra in (-20.0f64..20.0, -20.0f64..20.0),
        step in 0.0f64..4.0,
    ) {
        let plan = straight_plan(step);
        let mut s = scene(agents.iter().map(|&(x, y)| static_car(x, y)).collect());
        let before = scene_collides(&plan, &s, EGO_WIDTH, EGO_LENGTH);
        s.agents.push(static_car(extra.0, extra.1));
        prop_assert!(!before || scene_collides(&plan, &s, EGO_WIDTH, EGO_LENGTH));
    }
}
