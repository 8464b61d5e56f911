use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::gradcheck::{check_gradients, finite_diff_grad, relative_error};
use crate::geometry::make_depth_bins;

fn default_geometry() -> (CameraRig, DepthBins, GridSpec) {
    (
        CameraRig::surround(6, 64, 64, 75.0, 1.5).unwrap(),
        make_depth_bins(1.0, 35.0, 16).unwrap(),
        GridSpec::new(64.0, 32).unwrap(),
    )
}

fn tiny_spec(role: Role) -> NetworkSpec {
    NetworkSpec {
        role,
        stage_widths: vec![3, 4],
        stage_strides: vec![2, 2],
        lift_channels: if role == Role::Teacher { 4 } else { 3 },
        bev_channels: 3,
        det_hidden: 3,
        motion_hidden: 5,
        plan_hidden: 4,
    }
}

fn tiny_net(role: Role, seed: u64) -> BevNet<f64> {
    let rig = CameraRig::surround(2, 16, 16, 100.0, 1.5).unwrap();
    let bins = make_depth_bins(1.0, 9.0, 4).unwrap();
    let grid = GridSpec::new(16.0, 8).unwrap();
    BevNet::new(&tiny_spec(role), &rig, &bins, &grid, seed).unwrap()
}

fn random_images(n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_vec(&[1, n, h, w], (0..n * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

/// Random linear functional over every network output, including a motion
/// forecast for two agents per sample.
struct Probe {
    bev: Vec<f64>,
    heat: Vec<f64>,
    reg: Vec<f64>,
    plan: Vec<f64>,
    motion: Vec<f64>,
    agents: Vec<AgentQuery>,
}

impl Probe {
    fn new(net: &BevNet<f64>, batch: usize, rng: &mut ChaCha8Rng) -> Self {
        let cells = net.grid().num_cells();
        let bc = net.spec.bev_channels;
        let mut v = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let bev = v(bc * batch * cells);
        let heat = v(batch * cells);
        let reg = v(REG_CHANNELS * batch * cells);
        let plan = v(batch * TRAJ_DIM);
        let motion = v(2 * batch * TRAJ_DIM);
        let grid = net.grid();
        let agents = (0..2 * batch)
            .map(|i| {
                let x = rng.random_range(-7.0..7.0);
                let y = rng.random_range(-7.0..7.0);
                AgentQuery::new(i / 2, &grid, x, y, 1.8, 4.5, rng.random_range(-3.0..3.0), 2.0, -1.0)
            })
            .collect();
        Self {
            bev,
            heat,
            reg,
            plan,
            motion,
            agents,
        }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn value(&self, net: &BevNet<f64>, images: &Tensor<f64>) -> f64 {
        let (out, _) = net.forward(images).unwrap();
        let (m, _) = net.motion_forward(&out.bev, &self.agents).unwrap();
        Self::dot(&self.bev, out.bev.data())
            + Self::dot(&self.heat, out.heatmap.data())
            + Self::dot(&self.reg, out.regression.data())
            + Self::dot(&self.plan, out.plan.data())
            + Self::dot(&self.motion, m.data())
    }

    fn backward(&self, net: &mut BevNet<f64>, images: &Tensor<f64>) {
        net.params.zero_grad();
        let (out, cache) = net.forward(images).unwrap();
        let (m, mc) = net.motion_forward(&out.bev, &self.agents).unwrap();
        let mut g = OutputGrads::zeros(&out);
        g.bev = self.bev.clone();
        g.heat_prob = self.heat.clone();
        g.regression = self.reg.clone();
        g.plan = self.plan.clone();
        let dm = Tensor::from_vec(m.shape(), self.motion.clone()).unwrap();
        net.motion_backward(&mc, &dm, &mut g.bev).unwrap();
        net.backward(&out, &cache, &g).unwrap();
    }
}

#[test]
fn conv_count_and_empty_network() {
    let mut p = ParamSet::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Conv2d::new(&mut p, "c", 2, 4, 3, 1, &mut rng).unwrap();
    assert_eq!(count_params(&p), 76);
    assert_eq!(count_params(&ParamSet::<f64>::new()), 0);
}

#[test]
fn teacher_is_at_least_four_times_the_student() {
    let (rig, bins, grid) = default_geometry();
    let s = BevNet::<f32>::new(&NetworkSpec::student(), &rig, &bins, &grid, 1).unwrap();
    let t = BevNet::<f32>::new(&NetworkSpec::teacher(), &rig, &bins, &grid, 1).unwrap();
    assert!(t.count_params() >= 4 * s.count_params(), "{} vs {}", t.count_params(), s.count_params());
}

#[test]
fn default_backbone_shapes_and_uniform_depth_on_blank_images() {
    let (rig, bins, grid) = default_geometry();
    let net = BevNet::<f32>::new(&NetworkSpec::student(), &rig, &bins, &grid, 3).unwrap();
    let images = Tensor::zeros(&[1, 6, 64, 64]);
    let (f, d) = net.backbone_forward(&images).unwrap();
    assert_eq!(f.shape(), &[16, 6, 8, 8]);
    assert_eq!(d.shape(), &[16, 6, 8, 8]);
    assert!(d.data().iter().all(|&p| (p - 1.0 / 16.0).abs() < 1e-7));
    assert!(matches!(
        net.backbone_forward(&Tensor::zeros(&[1, 0, 64, 64])),
        Err(NetError::EmptyCameras)
    ));
}

#[test]
fn forward_is_deterministic() {
    let (rig, bins, grid) = default_geometry();
    let net = BevNet::<f32>::new(&NetworkSpec::student(), &rig, &bins, &grid, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let images: Tensor<f32> = random_images(12, 64, 64, &mut rng).cast();
    let (a, _) = net.forward(&images).unwrap();
    let (b, _) = net.forward(&images).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.bev), bits(&b.bev));
    assert_eq!(bits(&a.heatmap), bits(&b.heatmap));
    assert_eq!(bits(&a.plan), bits(&b.plan));
    assert_eq!(a.heatmap.shape(), &[1, 2, 32, 32]);
    assert_eq!(a.regression.shape(), &[8, 2, 32, 32]);
    assert_eq!(a.plan.shape(), &[2, 12]);
}

fn zero_all(net: &mut BevNet<f64>) {
    for p in net.params.iter_mut() {
        p.value.fill(0.0);
    }
}

#[test]
fn zero_weights_give_neutral_heads() {
    let mut net = tiny_net(Role::Student, 2);
    zero_all(&mut net);
    let images = Tensor::zeros(&[1, 2, 16, 16]);
    let (out, _) = net.forward(&images).unwrap();
    assert!(out.heatmap.data().iter().all(|&h| h == 0.5));
    assert!(out.plan.data().iter().all(|&v| v == 0.0));
    let grid = net.grid();
    let agents = vec![AgentQuery::new(0, &grid, 1.0, 2.0, 1.8, 4.5, 0.3, 1.0, 0.0); 3];
    let (m, _) = net.motion_forward(&out.bev, &agents).unwrap();
    assert_eq!(m.shape(), &[3, 12]);
    assert!(m.data().iter().all(|&v| v == 0.0));
}

#[test]
fn plan_patch_scales_with_resolution() {
    assert_eq!(plan_patch(32), 8);
    assert_eq!(plan_patch(128), 32);
    assert_eq!(plan_patch(8), 2);
}

#[test]
fn bilinear_taps_sum_to_one_inside_and_vanish_outside() {
    let grid = GridSpec::new(16.0, 8).unwrap();
    let t = bilinear_taps(&grid, 0.3, -1.1);
    assert_eq!(t.len(), 4);
    assert!((t.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(bilinear_taps(&grid, 9.0, 0.0).is_empty());
    let (x, y) = grid.cell_center(3, 4);
    let t = bilinear_taps(&grid, x, y);
    assert!(t.iter().any(|&(c, w)| c == 3 * 8 + 4 && (w - 1.0).abs() < 1e-12));
}

#[test]
fn every_parameter_gradient_matches_finite_differences() {
    for (seed, role) in [(11, Role::Student), (12, Role::Teacher)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = tiny_net(role, seed);
        let images = random_images(4, 16, 16, &mut rng);
        let probe = Probe::new(&net, 2, &mut rng);
        probe.backward(&mut net, &images);
        let mut eval_net = net.clone();
        let reports = check_gradients(
            &net.params,
            |p| {
                eval_net.params = p.clone();
                probe.value(&eval_net, &images)
            },
            1e-4,
            12,
            seed,
        )
        .unwrap();
        for r in &reports {
            assert!(r.passes(1e-4), "{role:?} {r:?}");
        }
    }
}

#[test]
fn motion_state_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut net = tiny_net(Role::Student, 21);
    let images = random_images(2, 16, 16, &mut rng);
    let (out, _) = net.forward(&images).unwrap();
    let grid = net.grid();
    let agents = vec![
        AgentQuery::new(0, &grid, 2.5, -3.0, 1.8, 4.5, 0.4, 3.0, 1.0),
        AgentQuery::new(0, &grid, -20.0, 0.0, 1.8, 4.5, 0.0, 0.0, 0.0),
    ];
    let (m, mc) = net.motion_forward(&out.bev, &agents).unwrap();
    let w: Vec<f64> = (0..m.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut dbev = vec![0.0; out.bev.numel()];
    let ds = net
        .motion_backward(&mc, &Tensor::from_vec(m.shape(), w.clone()).unwrap(), &mut dbev)
        .unwrap();
    let states = Tensor::from_vec(&[2, STATE_DIM], agents.iter().flat_map(|a| a.state).collect()).unwrap();
    let f = |s: &Tensor<f64>| {
        let mut q = agents.clone();
        for (a, row) in q.iter_mut().zip(s.data().chunks(STATE_DIM)) {
            a.state.copy_from_slice(row);
        }
        let (m, _) = net.motion_forward(&out.bev, &q).unwrap();
        m.data().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
    };
    let num = finite_diff_grad(f, &states, 1e-4).unwrap();
    for (a, n) in ds.data().iter().zip(num.data()) {
        assert!(relative_error(*a, *n) <= 1e-4, "{a} vs {n}");
    }
    let fb = |b: &Tensor<f64>| {
        let (m, _) = net.motion_forward(b, &agents).unwrap();
        m.data().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
    };
    let num = finite_diff_grad(fb, &out.bev, 1e-4).unwrap();
    for (a, n) in dbev.iter().zip(num.data()) {
        assert!(relative_error(*a, *n) <= 1e-4, "{a} vs {n}");
    }
}
