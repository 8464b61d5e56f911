use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tensor;
use crate::distill::{
    adaptive_kd, bbox_kd, det_kd, feat_kd, mot_kd, plan_kd, total_loss, Coefficients, KdTerms, LossWeights, Variant,
};
use crate::metrics::{self, EvalResult, GtCenter, ScoredCenter, EGO_LENGTH, EGO_WIDTH, MAP_THRESHOLDS};
use crate::nets::{
    decode_detections, scatter_add_sample, AgentQuery, BevNet, OutputGrads, Outputs, HORIZON, REG_CHANNELS, TRAJ_DIM,
    TRAJ_SCALE,
};
use crate::synthworld::{derive_seed, CachedAgent, Dataset, TeacherCache, TeacherSample};

use super::{
    adamw_step, gt_loss, lr_at, streams, OptimConfig, OptimState, Result, StepRecord, TrainError, TrainHistory,
    VariantConfig,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    /// Lowest heatmap score kept as a detection.
    pub score_threshold: f64,
    pub max_detections: usize,
    pub batch_size: usize,
    pub ego_width: f64,
    pub ego_length: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            max_detections: 32,
            batch_size: 8,
            ego_width: EGO_WIDTH,
            ego_length: EGO_LENGTH,
        }
    }
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn gt_queries(data: &Dataset, idx: &[usize]) -> Vec<AgentQuery> {
    idx.iter()
        .enumerate()
        .flat_map(|(b, &i)| data.samples[i].targets.agents.iter().map(move |a| a.query(b, &data.grid)))
        .collect()
}

fn check_cache(net: &BevNet<f32>, data: &Dataset, cache: &TeacherCache) -> Result<()> {
    let bad = |m: String| Err(TrainError::CacheMismatch(m));
    if cache.samples.len() != data.len() {
        return bad(format!("{} cached samples for {} scenes", cache.samples.len(), data.len()));
    }
    if cache.resolution != data.grid.resolution {
        return bad(format!("resolution {} vs grid {}", cache.resolution, data.grid.resolution));
    }
    if cache.bev_channels != net.spec.bev_channels {
        return bad(format!("{} BEV channels vs student {}", cache.bev_channels, net.spec.bev_channels));
    }
    if cache.horizon != HORIZON {
        return bad(format!("horizon {} vs {HORIZON}", cache.horizon));
    }
    let cells = data.grid.num_cells();
    for (i, s) in cache.samples.iter().enumerate() {
        let traj_ok = s.plan.len() == TRAJ_DIM && s.agents.iter().all(|a| a.forecast.len() == TRAJ_DIM);
        if s.bev.len() != cache.bev_channels * cells
            || s.heatmap.len() != cells
            || s.regression.len() != REG_CHANNELS * cells
            || !traj_ok
        {
            return bad(format!("sample {i} has inconsistent sizes"));
        }
    }
    Ok(())
}

/// Trajectories enter every loss in units of [`TRAJ_SCALE`] meters.
fn traj_units(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x / TRAJ_SCALE).collect()
}

/// One optimizer step on the batch `idx`; returns the loss breakdown.
#[allow(clippy::too_many_arguments)]
fn train_step(
    net: &mut BevNet<f32>,
    data: &Dataset,
    cache: Option<&TeacherCache>,
    idx: &[usize],
    variant: Variant,
    weights: &LossWeights,
    state: &mut OptimState,
    lr: f64,
    optim: &OptimConfig,
) -> Result<crate::distill::LossBreakdown> {
    let images = data.batch_images(idx);
    let (out, fcache) = net.forward(&images)?;
    let bsz = idx.len();
    let inv = 1.0 / bsz as f64;
    let grid = data.grid;
    let cells = grid.num_cells();
    let coef = Coefficients::new(weights, variant)?;
    let bc = out.bev_channels();
    let mut g = OutputGrads::zeros(&out);

    let queries = gt_queries(data, idx);
    let (fc, fc_cache) = net.motion_forward(&out.bev, &queries)?;
    let mut d_fc = vec![0.0f32; fc.numel()];

    let teacher_agents: Vec<(usize, &CachedAgent)> = match cache {
        Some(c) if coef.mot > 0.0 => idx
            .iter()
            .enumerate()
            .flat_map(|(b, &i)| c.samples[i].agents.iter().map(move |a| (b, a)))
            .collect(),
        _ => Vec::new(),
    };
    let t_queries: Vec<AgentQuery> = teacher_agents
        .iter()
        .map(|(b, a)| AgentQuery::from_detection(*b, &grid, &a.detection()))
        .collect();
    let mot = if coef.mot > 0.0 {
        Some(net.motion_forward(&out.bev, &t_queries)?)
    } else {
        None
    };
    let mut d_mot = vec![0.0f32; t_queries.len() * TRAJ_DIM];

    let mut gt_sum = 0.0;
    let mut kd = KdTerms::default();
    let (mut gt_off, mut t_off) = (0, 0);
    for (b, &i) in idx.iter().enumerate() {
        let t = &data.samples[i].targets;
        let heat = out.heatmap_sample(b);
        let reg = out.regression_sample(b);
        let plan = out.plan_sample(b);
        let na = t.agents.len();
        let pred = to_f64(&fc.data()[gt_off * TRAJ_DIM..(gt_off + na) * TRAJ_DIM]);
        let l = gt_loss(&heat, &reg, &pred, &plan, t)?;
        gt_sum += l.value;
        scatter_add_sample(&mut g.heat_logit, 1, bsz, b, &l.d_heat_logit, inv);
        scatter_add_sample(&mut g.regression, REG_CHANNELS, bsz, b, &l.d_regression, inv);
        for (k, d) in l.d_plan.iter().enumerate() {
            g.plan[b * TRAJ_DIM + k] += (inv * d) as f32;
        }
        for (k, d) in l.d_forecast.iter().enumerate() {
            d_fc[gt_off * TRAJ_DIM + k] += (inv * d) as f32;
        }
        gt_off += na;

        let Some(c) = cache else { continue };
        let ts = &c.samples[i];
        if coef.feat > 0.0 || coef.adapt > 0.0 {
            let s = out.bev_sample(b);
            let tb = to_f64(&ts.bev);
            if coef.feat > 0.0 {
                let r = feat_kd(&s, &tb, bc)?;
                kd.feat += inv * r.value;
                scatter_add_sample(&mut g.bev, bc, bsz, b, &r.grad, inv * coef.feat);
            }
            if coef.adapt > 0.0 && t.mask.count() > 0 {
                let r = adaptive_kd(&s, &tb, bc, &t.mask)?;
                kd.adapt += inv * r.value;
                scatter_add_sample(&mut g.bev, bc, bsz, b, &r.grad, inv * coef.adapt);
            }
        }
        if coef.det > 0.0 {
            let r = det_kd(&heat, &to_f64(&ts.heatmap))?;
            kd.det += inv * r.value;
            scatter_add_sample(&mut g.heat_prob, 1, bsz, b, &r.grad, inv * coef.det);
        }
        if coef.bbox > 0.0 {
            let mut fg: Vec<usize> = ts
                .agents
                .iter()
                .map(|a| {
                    let d = a.detection();
                    d.row * grid.resolution + d.col
                })
                .filter(|&k| k < cells)
                .collect();
            fg.sort_unstable();
            fg.dedup();
            let r = bbox_kd(&reg, &to_f64(&ts.regression), REG_CHANNELS, &fg)?;
            kd.bbox += inv * r.value;
            scatter_add_sample(&mut g.regression, REG_CHANNELS, bsz, b, &r.grad, inv * coef.bbox);
        }
        if let Some((m, _)) = &mot {
            let n = ts.agents.len();
            if n > 0 {
                let s = traj_units(&to_f64(&m.data()[t_off * TRAJ_DIM..(t_off + n) * TRAJ_DIM]));
                let tf: Vec<f64> = ts.agents.iter().flat_map(|a| traj_units(&to_f64(&a.forecast))).collect();
                let r = mot_kd(&s, &tf, n)?;
                kd.mot += inv * r.value;
                for (k, d) in r.grad.iter().enumerate() {
                    d_mot[t_off * TRAJ_DIM + k] += (inv * coef.mot * d / TRAJ_SCALE) as f32;
                }
            }
            t_off += n;
        }
        if coef.plan > 0.0 {
            let r = plan_kd(&traj_units(&plan), &traj_units(&to_f64(&ts.plan)))?;
            kd.plan += inv * r.value;
            for (k, d) in r.grad.iter().enumerate() {
                g.plan[b * TRAJ_DIM + k] += (inv * coef.plan * d / TRAJ_SCALE) as f32;
            }
        }
    }
    let breakdown = total_loss(gt_sum * inv, &kd, weights, variant)?;

    net.params.zero_grad();
    if !queries.is_empty() {
        let d = Tensor::from_vec(&[queries.len(), TRAJ_DIM], d_fc).map_err(crate::nets::NetError::from)?;
        net.motion_backward(&fc_cache, &d, &mut g.bev)?;
    }
    if let Some((_, mc)) = &mot {
        if !t_queries.is_empty() {
            let d = Tensor::from_vec(&[t_queries.len(), TRAJ_DIM], d_mot).map_err(crate::nets::NetError::from)?;
            net.motion_backward(mc, &d, &mut g.bev)?;
        }
    }
    net.backward(&out, &fcache, &g)?;
    if breakdown.total.is_finite() {
        adamw_step(&mut net.params, state, lr, &optim.adamw)?;
    }
    Ok(breakdown)
}

#[allow(clippy::too_many_arguments)]
fn train_loop(
    net: &mut BevNet<f32>,
    data: &Dataset,
    cache: Option<&TeacherCache>,
    variant: Variant,
    weights: &LossWeights,
    optim: &OptimConfig,
    batch_seed: (u64, u64),
    eval: Option<(&Dataset, &EvalSettings)>,
) -> Result<TrainHistory> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if variant.uses_teacher() {
        let c = cache.ok_or(TrainError::MissingCache(variant))?;
        check_cache(net, data, c)?;
    }
    let sched = optim.schedule(data.len())?;
    let mut state = OptimState::new(&net.params);
    let mut history = TrainHistory::default();
    let mut step = 0;
    for epoch in 0..optim.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(batch_seed.0, batch_seed.1, epoch as u64));
        order.shuffle(&mut rng);
        for idx in order.chunks(optim.batch_size) {
            step += 1;
            let lr = lr_at(step, &sched)?;
            let loss = train_step(net, data, cache, idx, variant, weights, &mut state, lr, optim)?;
            if !loss.total.is_finite() {
                return Err(TrainError::Diverged { step });
            }
            history.steps.push(StepRecord { step, lr, loss });
        }
        if let Some((ev, settings)) = eval {
            history.epochs.push(evaluate(net, ev, settings)?);
        }
    }
    Ok(history)
}

/// Trains the teacher on ground truth only. Batching draws from the
/// teacher stream of `seed`.
pub fn train_teacher(
    mut net: BevNet<f32>,
    data: &Dataset,
    optim: &OptimConfig,
    seed: u64,
    eval: Option<(&Dataset, &EvalSettings)>,
) -> Result<(BevNet<f32>, TrainHistory)> {
    let h = train_loop(
        &mut net,
        data,
        None,
        Variant::S0,
        &LossWeights::zero(),
        optim,
        (seed, streams::TEACHER_BATCHES),
        eval,
    )?;
    Ok((net, h))
}

/// Trains one student variant. The teacher is only seen through `cache`.
pub fn train_variant(
    cfg: &VariantConfig,
    mut net: BevNet<f32>,
    data: &Dataset,
    cache: Option<&TeacherCache>,
    eval: Option<(&Dataset, &EvalSettings)>,
) -> Result<(BevNet<f32>, TrainHistory)> {
    let h = train_loop(
        &mut net,
        data,
        cache,
        cfg.variant,
        &cfg.weights,
        &cfg.optim,
        (cfg.seed, streams::STUDENT_BATCHES),
        eval,
    )?;
    Ok((net, h))
}

fn batched_outputs<'a>(
    net: &'a BevNet<f32>,
    data: &'a Dataset,
    batch: usize,
) -> impl Iterator<Item = Result<(Vec<usize>, Outputs<f32>)>> + 'a {
    let idx: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<Vec<usize>> = idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect();
    chunks.into_iter().map(move |c| {
        let (out, _) = net.forward(&data.batch_images(&c))?;
        Ok((c, out))
    })
}

/// Runs the frozen teacher over every sample, in dataset order. Agents are
/// the teacher's own decoded detections above `threshold`.
pub fn build_cache(
    teacher: &BevNet<f32>,
    data: &Dataset,
    threshold: f64,
    max_agents: usize,
    batch: usize,
) -> Result<TeacherCache> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut samples = Vec::with_capacity(data.len());
    for r in batched_outputs(teacher, data, batch) {
        let (chunk, out) = r?;
        for b in 0..chunk.len() {
            let dets = decode_detections(&out.detection_maps(b), threshold, max_agents);
            let q: Vec<AgentQuery> = dets.iter().map(|d| AgentQuery::from_detection(b, &data.grid, d)).collect();
            let (fc, _) = teacher.motion_forward(&out.bev, &q)?;
            let agents = dets
                .iter()
                .enumerate()
                .map(|(a, d)| CachedAgent::new(d, fc.data()[a * TRAJ_DIM..(a + 1) * TRAJ_DIM].to_vec()))
                .collect();
            let cast = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
            samples.push(TeacherSample {
                bev: cast(out.bev_sample(b)),
                heatmap: cast(out.heatmap_sample(b)),
                regression: cast(out.regression_sample(b)),
                agents,
                plan: out.plan.data()[b * TRAJ_DIM..(b + 1) * TRAJ_DIM].to_vec(),
            });
        }
    }
    Ok(TeacherCache {
        bev_channels: teacher.spec.bev_channels,
        resolution: data.grid.resolution,
        horizon: HORIZON,
        samples,
    })
}

/// mAP over decoded detections, minADE over ground-truth agent queries,
/// L2 at the final step and collision rate of the predicted plans.
pub fn evaluate(net: &BevNet<f32>, data: &Dataset, s: &EvalSettings) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let (mut ade_sum, mut ade_n, mut l2_sum) = (0.0, 0usize, 0.0);
    let mut plans = Vec::with_capacity(data.len());
    for r in batched_outputs(net, data, s.batch_size) {
        let (chunk, out) = r?;
        let queries = gt_queries(data, &chunk);
        let (fc, _) = net.motion_forward(&out.bev, &queries)?;
        let mut off = 0;
        for (b, &i) in chunk.iter().enumerate() {
            let t = &data.samples[i].targets;
            for d in decode_detections(&out.detection_maps(b), s.score_threshold, s.max_detections) {
                preds.push(ScoredCenter {
                    scene: i,
                    x: d.x,
                    y: d.y,
                    score: d.score,
                });
            }
            for a in &t.agents {
                gts.push(GtCenter { scene: i, x: a.x, y: a.y });
                let p = to_f64(&fc.data()[off * TRAJ_DIM..(off + 1) * TRAJ_DIM]);
                ade_sum += metrics::min_ade(&[&p], &a.future).map_err(|e| TrainError::Shape(e.to_string()))?;
                ade_n += 1;
                off += 1;
            }
            let plan = out.plan_sample(b);
            l2_sum += metrics::l2_at_horizon(&plan, &t.plan, HORIZON).map_err(|e| TrainError::Shape(e.to_string()))?;
            plans.push(plan);
        }
    }
    let scenes: Vec<_> = data.samples.iter().map(|s| s.scene.clone()).collect();
    let collision = metrics::collision_rate(&plans, &scenes, s.ego_width, s.ego_length)
        .map_err(|e| TrainError::Shape(e.to_string()))?;
    Ok(EvalResult {
        map: metrics::map_score(&preds, &gts, &MAP_THRESHOLDS).unwrap_or(0.0),
        min_ade: if ade_n == 0 { 0.0 } else { ade_sum / ade_n as f64 },
        l2_at_3s: l2_sum / data.len() as f64,
        collision_rate: collision,
        n_scenes: data.len(),
    })
}
