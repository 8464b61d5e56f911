//! Oracle checks shared by the `selftest` command and the acceptance suite:
//! finite-difference gradients, KL properties, brute-force lift/splat
//! equivalence, the full-mask reduction and optimizer exactness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::gradcheck::{check_gradients, finite_diff_grad, relative_error};
use crate::diffcore::{ParamSet, Tensor};
use crate::distill::{
    adaptive_kd, bbox_kd, det_kd, feat_kd, kl_divergence, mot_kd, plan_kd, total_loss, Coefficients, KdTerms,
    LossGrad, LossWeights, RegionMask, Variant,
};
use crate::geometry::oracle::brute_force_splat;
use crate::geometry::{lift_splat, make_depth_bins, CameraRig, GridSpec, SplatPlan};
use crate::nets::{AgentQuery, BevNet, NetworkSpec, OutputGrads, Role, REG_CHANNELS, STATE_DIM, TRAJ_DIM};
use crate::synthworld::{gen_scene, make_targets, WorldParams};
use crate::trainer::{adamw_step, gt_loss, lr_at, AdamW, OptimState, ScheduleSpec};

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-4;
pub const SEEDS: u64 = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, result: Result<String, String>) -> Self {
        let (passed, detail) = match result {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Largest relative error between `grad` and central differences of `f`.
fn slice_grad_error(f: impl Fn(&[f64]) -> (f64, Vec<f64>), x: &[f64]) -> Result<f64, String> {
    let (_, analytic) = f(x);
    let t = Tensor::from_vec(&[x.len()], x.to_vec()).map_err(|e| e.to_string())?;
    let numeric = finite_diff_grad(|p| f(p.data()).0, &t, FD_STEP).map_err(|e| e.to_string())?;
    Ok(analytic
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max))
}

fn loss_check(name: &str, mut case: impl FnMut(u64) -> Result<f64, String>) -> Check {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        match case(seed) {
            Ok(e) => worst = worst.max(e),
            Err(e) => return Check::new(name, Err(format!("seed {seed}: {e}"))),
        }
    }
    let res = if worst <= GRAD_TOL {
        Ok(format!("max rel err {worst:.2e} over {SEEDS} seeds"))
    } else {
        Err(format!("max rel err {worst:.2e} exceeds {GRAD_TOL:e}"))
    };
    Check::new(name, res)
}

fn lg(r: Result<LossGrad, crate::distill::DistillError>) -> (f64, Vec<f64>) {
    let r = r.expect("valid loss inputs");
    (r.value, r.grad)
}

fn random_mask(rng: &mut ChaCha8Rng, res: usize) -> RegionMask {
    let mut m = RegionMask::empty(res);
    for c in m.cells.iter_mut() {
        *c = rng.random_bool(0.4);
    }
    m.cells[0] = true;
    m
}

fn tiny_net(role: Role, seed: u64) -> BevNet<f64> {
    let rig = CameraRig::surround(2, 16, 16, 100.0, 1.5).expect("fixed rig");
    let bins = make_depth_bins(1.0, 9.0, 4).expect("fixed bins");
    let grid = GridSpec::new(16.0, 8).expect("fixed grid");
    let spec = NetworkSpec {
        role,
        stage_widths: vec![3, 4],
        stage_strides: vec![2, 2],
        lift_channels: if role == Role::Teacher { 4 } else { 3 },
        bev_channels: 3,
        det_hidden: 3,
        motion_hidden: 5,
        plan_hidden: 4,
    };
    BevNet::new(&spec, &rig, &bins, &grid, seed).expect("valid tiny spec")
}

/// Random linear functional of every head output, including motion
/// forecasts for two agents per sample.
fn head_reduction_error(role: Role, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = tiny_net(role, seed);
    let batch = 2;
    let images = Tensor::from_vec(&[1, 2 * batch, 16, 16], uniform(&mut rng, 2 * batch * 256, 0.0, 1.0))
        .map_err(|e| e.to_string())?;
    let cells = net.grid().num_cells();
    let bc = net.spec.bev_channels;
    let w_bev = uniform(&mut rng, bc * batch * cells, -1.0, 1.0);
    let w_heat = uniform(&mut rng, batch * cells, -1.0, 1.0);
    let w_reg = uniform(&mut rng, REG_CHANNELS * batch * cells, -1.0, 1.0);
    let w_plan = uniform(&mut rng, batch * TRAJ_DIM, -1.0, 1.0);
    let w_mot = uniform(&mut rng, 2 * batch * TRAJ_DIM, -1.0, 1.0);
    let grid = net.grid();
    let agents: Vec<AgentQuery> = (0..2 * batch)
        .map(|i| {
            let (x, y, yaw) = (rng.random_range(-7.0..7.0), rng.random_range(-7.0..7.0), rng.random_range(-3.0..3.0));
            AgentQuery::new(i / 2, &grid, x, y, 1.8, 4.5, yaw, 2.0, -1.0)
        })
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let value = |n: &BevNet<f64>| {
        let (out, _) = n.forward(&images).expect("forward");
        let (m, _) = n.motion_forward(&out.bev, &agents).expect("motion");
        dot(&w_bev, out.bev.data())
            + dot(&w_heat, out.heatmap.data())
            + dot(&w_reg, out.regression.data())
            + dot(&w_plan, out.plan.data())
            + dot(&w_mot, m.data())
    };
    net.params.zero_grad();
    let (out, cache) = net.forward(&images).map_err(|e| e.to_string())?;
    let (m, mc) = net.motion_forward(&out.bev, &agents).map_err(|e| e.to_string())?;
    let mut g = OutputGrads::zeros(&out);
    g.bev = w_bev.clone();
    g.heat_prob = w_heat.clone();
    g.regression = w_reg.clone();
    g.plan = w_plan.clone();
    let dm = Tensor::from_vec(m.shape(), w_mot.clone()).map_err(|e| e.to_string())?;
    let dstate = net.motion_backward(&mc, &dm, &mut g.bev).map_err(|e| e.to_string())?;
    net.backward(&out, &cache, &g).map_err(|e| e.to_string())?;

    let mut probe = net.clone();
    let reports = check_gradients(
        &net.params,
        |p: &ParamSet<f64>| {
            probe.params = p.clone();
            value(&probe)
        },
        FD_STEP,
        12,
        seed,
    )
    .map_err(|e| e.to_string())?;
    let mut worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);

    let states = Tensor::from_vec(&[agents.len(), STATE_DIM], agents.iter().flat_map(|a| a.state).collect())
        .map_err(|e| e.to_string())?;
    let numeric = finite_diff_grad(
        |s| {
            let mut q = agents.clone();
            for (a, row) in q.iter_mut().zip(s.data().chunks(STATE_DIM)) {
                a.state.copy_from_slice(row);
            }
            let (m, _) = net.motion_forward(&out.bev, &q).expect("motion");
            dot(&w_mot, m.data())
        },
        &states,
        FD_STEP,
    )
    .map_err(|e| e.to_string())?;
    for (a, n) in dstate.data().iter().zip(numeric.data()) {
        worst = worst.max(relative_error(*a, *n));
    }
    Ok(worst)
}

/// Criterion: every loss and every head reduction matches finite
/// differences on ten seeds.
pub fn gradient_oracle() -> Vec<Check> {
    let mut checks = Vec::new();
    checks.push(loss_check("grad feat_kd", |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let t = uniform(&mut rng, 3 * 25, -1.0, 1.0);
        let x = uniform(&mut rng, 3 * 25, -1.0, 1.0);
        slice_grad_error(|x| lg(feat_kd(x, &t, 3)), &x)
    }));
    checks.push(loss_check("grad adaptive_kd", |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mask = random_mask(&mut rng, 5);
        let t = uniform(&mut rng, 3 * 25, -1.0, 1.0);
        let x = uniform(&mut rng, 3 * 25, -1.0, 1.0);
        slice_grad_error(|x| lg(adaptive_kd(x, &t, 3, &mask)), &x)
    }));
    checks.push(loss_check("grad det_kd", |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let t = uniform(&mut rng, 25, 0.01, 0.99);
        let x = uniform(&mut rng, 25, 0.01, 0.99);
        slice_grad_error(|x| lg(det_kd(x, &t)), &x)
    }));
    checks.push(loss_check("grad bbox_kd", |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let t = uniform(&mut rng, 8 * 16, -1.0, 1.0);
        let x = uniform(&mut rng, 8 * 16, -1.0, 1.0);
        let fg = vec![1, 5, 11];
        slice_grad_error(|x| lg(bbox_kd(x, &t, 8, &fg)), &x)
    }));
    checks.push(loss_check("grad mot_kd", |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let t = uniform(&mut rng, 3 * TRAJ_DIM, -5.0, 5.0);
        let x = uniform(&mut rng, 3 * TRAJ_DIM, -5.0, 5.0);
        slice_grad_error(|x| lg(mot_kd(x, &t, 3)), &x)
    }));
    checks.push(loss_check("grad plan_kd", |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let t = uniform(&mut rng, TRAJ_DIM, -5.0, 5.0);
        let x = uniform(&mut rng, TRAJ_DIM, -5.0, 5.0);
        slice_grad_error(|x| lg(plan_kd(x, &t)), &x)
    }));
    checks.push(loss_check("grad total_loss", |s| {
        let variant = Variant::ALL[s as usize % 4];
        let w = LossWeights::default();
        let c = Coefficients::new(&w, variant).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let x = uniform(&mut rng, 7, 0.0, 3.0);
        let f = |x: &[f64]| {
            let kd = KdTerms {
                feat: x[1],
                det: x[2],
                bbox: x[3],
                mot: x[4],
                plan: x[5],
                adapt: x[6],
            };
            let v = total_loss(x[0], &kd, &w, variant).expect("valid weights").total;
            (v, vec![1.0, c.feat, c.det, c.bbox, c.mot, c.plan, c.adapt])
        };
        slice_grad_error(f, &x)
    }));
    checks.push(loss_check("grad gt_loss", |s| {
        let p = WorldParams {
            extent: 32.0,
            max_agents: 3,
            ..WorldParams::default()
        };
        let scene = gen_scene(s, &p).map_err(|e| e.to_string())?;
        let t = make_targets(&scene, &GridSpec::new(32.0, 8).expect("grid"), 6).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let nf = TRAJ_DIM * t.agents.len();
        let mut x = uniform(&mut rng, 64 + 512 + nf + TRAJ_DIM, -2.0, 2.0);
        for (i, v) in x[64..576].iter_mut().enumerate() {
            *v = t.regression[i] + *v + 0.01 * v.signum();
        }
        let f = |x: &[f64]| {
            let heat: Vec<f64> = x[..64].iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
            let l = gt_loss(&heat, &x[64..576], &x[576..576 + nf], &x[576 + nf..], &t).expect("shapes");
            (l.value, [l.d_heat_logit, l.d_regression, l.d_forecast, l.d_plan].concat())
        };
        slice_grad_error(f, &x)
    }));
    checks.push(loss_check("grad student heads", |s| head_reduction_error(Role::Student, 100 + s)));
    checks.push(loss_check("grad teacher heads", |s| head_reduction_error(Role::Teacher, 200 + s)));
    checks
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v = uniform(rng, n, 1e-3, 1.0);
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

/// Criterion: KL nonnegativity, zero exactly at equality, hand values.
pub fn kl_properties() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut min_kl = f64::INFINITY;
    let mut max_self = 0.0f64;
    let mut min_distinct = f64::INFINITY;
    for _ in 0..1000 {
        let n = rng.random_range(2..20);
        let p = random_distribution(&mut rng, n);
        let q = random_distribution(&mut rng, n);
        let d = kl_divergence(&p, &q);
        min_kl = min_kl.min(d);
        min_distinct = min_distinct.min(d);
        max_self = max_self.max(kl_divergence(&p, &p).abs());
    }
    let nonneg = if min_kl >= 0.0 {
        Ok(format!("min KL {min_kl:.3e} over 1000 pairs"))
    } else {
        Err(format!("negative KL {min_kl:e}"))
    };
    let zero = if max_self <= 1e-12 && min_distinct > 1e-12 {
        Ok(format!("max KL(p,p) {max_self:.1e}, min distinct {min_distinct:.2e}"))
    } else {
        Err(format!("KL(p,p) up to {max_self:e}, distinct down to {min_distinct:e}"))
    };
    let a = det_kd(&[0.25, 0.75], &[0.5, 0.5]).map(|r| r.value);
    let b = det_kd(&[0.3; 4], &[0.9, 0.0, 0.0, 0.0]).map(|r| r.value);
    let hand = match (a, b) {
        (Ok(a), Ok(b)) if (a - 0.14384).abs() <= 1e-5 && (b - 4f64.ln()).abs() <= 1e-5 => {
            Ok(format!("{a:.6} and {b:.6}"))
        }
        (a, b) => Err(format!("got {a:?} and {b:?}")),
    };
    vec![
        Check::new("kl nonnegative", nonneg),
        Check::new("kl zero iff equal", zero),
        Check::new("kl hand values", hand),
    ]
}

/// Criterion: the lift/splat plan matches the brute-force pooling on small
/// random configurations, and conserves mass.
pub fn lss_equivalence() -> Vec<Check> {
    let mut worst = 0.0f64;
    let mut worst_mass = 0.0f64;
    let mut cases = 0;
    let mut failure = None;
    for seed in 0..24u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let res = rng.random_range(8..=16usize);
        let cams = rng.random_range(1..=2usize);
        let nbins = rng.random_range(1..=8usize);
        let (fh, fw) = (rng.random_range(1..=4usize), rng.random_range(1..=4usize));
        let extent = rng.random_range(8.0..40.0);
        let built = (|| {
            let rig = CameraRig::surround(cams, 4 * fw, 4 * fh, rng.random_range(60.0..120.0), 1.5)?;
            let bins = make_depth_bins(1.0, rng.random_range(4.0..30.0), nbins)?;
            let grid = GridSpec::new(extent, res)?;
            let plan = SplatPlan::new(&rig, &bins, &grid, fh, fw)?;
            Ok::<_, crate::geometry::GeometryError>((rig, bins, grid, plan))
        })();
        let (rig, bins, grid, plan) = match built {
            Ok(v) => v,
            Err(e) => {
                failure = Some(format!("seed {seed}: {e}"));
                break;
            }
        };
        let ch = rng.random_range(1..=3usize);
        let p = fh * fw;
        let feats: Vec<Vec<Vec<f64>>> = (0..cams).map(|_| (0..ch).map(|_| uniform(&mut rng, p, -1.0, 1.0)).collect()).collect();
        let depths: Vec<Vec<Vec<f64>>> = (0..cams)
            .map(|_| {
                let raw: Vec<Vec<f64>> = (0..nbins).map(|_| uniform(&mut rng, p, 0.01, 1.0)).collect();
                let mut out = raw.clone();
                for px in 0..p {
                    let s: f64 = raw.iter().map(|b| b[px]).sum();
                    for b in 0..nbins {
                        out[b][px] = raw[b][px] / s;
                    }
                }
                out
            })
            .collect();
        let reference = brute_force_splat(&feats, &depths, &rig, &bins, &grid, fh, fw);
        let ft: Vec<Tensor<f32>> = feats
            .iter()
            .map(|c| Tensor::from_vec(&[ch, fh, fw], c.concat()).expect("shape").cast())
            .collect();
        let dt: Vec<Tensor<f32>> = depths
            .iter()
            .map(|c| Tensor::from_vec(&[nbins, fh, fw], c.concat()).expect("shape").cast())
            .collect();
        let got = match lift_splat(&ft, &dt, &plan) {
            Ok(g) => g,
            Err(e) => {
                failure = Some(format!("seed {seed}: {e}"));
                break;
            }
        };
        for (a, b) in got.data.iter().zip(&reference) {
            worst = worst.max((*a as f64 - b).abs());
        }
        // mass: every in-grid (camera, pixel, bin) contributes w·f exactly once
        let ft64: Vec<Tensor<f64>> = ft.iter().map(|t| t.cast()).collect();
        let dt64: Vec<Tensor<f64>> = dt.iter().map(|t| t.cast()).collect();
        let g64 = lift_splat(&ft64, &dt64, &plan).expect("validated above");
        for c in 0..ch {
            let mut expected = 0.0;
            for cam in 0..cams {
                for px in 0..p {
                    for b in 0..nbins {
                        if plan.cell(cam, px, b).is_some() {
                            expected += dt64[cam].data()[b * p + px] * ft64[cam].data()[c * p + px];
                        }
                    }
                }
            }
            let cells = grid.num_cells();
            let total: f64 = g64.data[c * cells..(c + 1) * cells].iter().sum();
            worst_mass = worst_mass.max((total - expected).abs());
        }
        cases += 1;
    }
    let eq = match failure {
        Some(f) => Err(f),
        None if worst <= 1e-5 => Ok(format!("{cases} configs, max abs diff {worst:.2e}")),
        None => Err(format!("max abs diff {worst:e}")),
    };
    let mass = if worst_mass <= 1e-6 {
        Ok(format!("max mass error {worst_mass:.2e}"))
    } else {
        Err(format!("mass error {worst_mass:e}"))
    };
    vec![Check::new("lss oracle equivalence", eq), Check::new("lss mass conservation", mass)]
}

/// Criterion: the region-masked loss with a full mask is the plain feature
/// loss on 100 random grids.
pub fn adaptive_reduction() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let res = rng.random_range(1..=16usize);
        let ch = rng.random_range(1..=8usize);
        let n = ch * res * res;
        let s = uniform(&mut rng, n, -3.0, 3.0);
        let t = uniform(&mut rng, n, -3.0, 3.0);
        let a = adaptive_kd(&s, &t, ch, &RegionMask::full(res)).expect("full mask").value;
        let f = feat_kd(&s, &t, ch).expect("shapes").value;
        worst = worst.max((a - f).abs());
    }
    let r = if worst <= 1e-12 {
        Ok(format!("max diff {worst:.1e} on 100 grids"))
    } else {
        Err(format!("max diff {worst:e}"))
    };
    vec![Check::new("adaptive full mask equals feat", r)]
}

/// Criterion: AdamW single step and schedule endpoints.
pub fn optimizer_exactness() -> Vec<Check> {
    let step = |eps: f64| {
        let mut p = ParamSet::<f64>::new();
        let id = p.add("w", Tensor::from_vec(&[1], vec![1.0]).expect("shape")).expect("fresh set");
        p.grad_mut(id)[0] = 0.5;
        let mut st = OptimState::new(&p);
        let hp = AdamW { eps, ..AdamW::default() };
        adamw_step(&mut p, &mut st, 0.1, &hp).expect("finite");
        p.value(id)[0]
    };
    let w0 = step(0.0);
    let w8 = step(1e-8);
    let adam = if (w0 - 0.899).abs() <= 1e-12 && (w8 - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8) - 0.001)).abs() <= 1e-12 {
        Ok(format!("w' = {w0:.15} (eps 0), {w8:.12} (eps 1e-8)"))
    } else {
        Err(format!("w' = {w0:.15} (eps 0), {w8:.15} (eps 1e-8)"))
    };
    let s = ScheduleSpec {
        base_lr: 2e-4,
        warmup_steps: 64,
        total_steps: 1280,
        floor_lr: 1e-6,
    };
    let at = |k| lr_at(k, &s).expect("in range");
    let mid = lr_at(672, &ScheduleSpec { floor_lr: 0.0, ..s }).expect("in range");
    let sched = if at(0) == 0.0 && at(64) == 2e-4 && at(1280) == 1e-6 && (mid - 1e-4).abs() <= 1e-12 {
        Ok(format!("0, {:e}, {:e}, mid {mid:e}", at(64), at(1280)))
    } else {
        Err(format!("{}, {}, {}, mid {mid}", at(0), at(64), at(1280)))
    };
    vec![Check::new("adamw hand value", adam), Check::new("lr schedule endpoints", sched)]
}

pub fn run_all() -> Vec<Check> {
    let mut all = gradient_oracle();
    all.extend(kl_properties());
    all.extend(lss_equivalence());
    all.extend(adaptive_reduction());
    all.extend(optimizer_exactness());
    all
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_suites_pass() {
        for c in gradient_oracle()
            .into_iter()
            .chain(kl_properties())
            .chain(lss_equivalence())
            .chain(adaptive_reduction())
            .chain(optimizer_exactness())
        {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}

