//! Losses, target assignment, and the streaming two-stage train loop.
//!
//! Trajectory heads train winner-takes-all: only the mode closest to the
//! ground truth receives the regression loss, and the score head is
//! supervised toward that winner. Detection and map targets are assigned by
//! class-aware nearest-center matching (optionally Hungarian).

use std::collections::HashMap;

use ndarray::{Array2, ArrayD};
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::config::{RunConfig, TrainStage};
use crate::error::{Error, Result};
use crate::geometry::normalize_angle;
use crate::memory::MemoryQueue;
use crate::model::{BridgeModel, FrameOutput};
use crate::nn::{AdamW, Session};
use crate::perception::{AnchorBox11, TrackTable};
use crate::scene::{
    observe, resample_polyline, step_world, AgentClass, MapClass, ObservationFrame, Scenario,
    WorldState,
};

/// Ground truth for one frame, in the current ego frame.
pub struct FrameTruth {
    pub boxes: Vec<(u64, AgentClass, AnchorBox11)>,
    /// Per polyline, [P, 2] points; order matches the scenario map.
    pub map_points: Vec<Array2<f64>>,
    pub map_classes: Vec<MapClass>,
}

/// Noise-free targets computed from the simulator state.
pub fn frame_truth(state: &WorldState, map_points: usize) -> FrameTruth {
    let ego = state.ego_pose;
    let (es, ec) = ego.yaw.sin_cos();
    let boxes = state
        .agents
        .iter()
        .map(|a| {
            let local = ego.inverse_transform_point((a.pose.x, a.pose.y));
            let rel_yaw = normalize_angle(a.pose.yaw - ego.yaw);
            let (vy_w, vx_w) = (a.pose.yaw.sin() * a.speed, a.pose.yaw.cos() * a.speed);
            let b = AnchorBox11 {
                x: local.0,
                y: local.1,
                z: 0.0,
                ln_w: a.truth.width.ln(),
                ln_h: (1.6f64).ln(),
                ln_l: a.truth.length.ln(),
                sin_yaw: rel_yaw.sin(),
                cos_yaw: rel_yaw.cos(),
                vx: vx_w * ec + vy_w * es,
                vy: -vx_w * es + vy_w * ec,
                vz: 0.0,
            };
            (a.truth.agent_id, a.truth.class, b)
        })
        .collect();
    let mut pts = Vec::new();
    let mut classes = Vec::new();
    for pl in &state.scenario.map.polylines {
        let rs = resample_polyline(&pl.points, map_points);
        let mut arr = Array2::zeros((map_points, 2));
        for (i, &(x, y)) in rs.iter().enumerate() {
            let local = ego.inverse_transform_point((x, y));
            arr[(i, 0)] = local.0;
            arr[(i, 1)] = local.1;
        }
        pts.push(arr);
        classes.push(pl.class);
    }
    FrameTruth {
        boxes,
        map_points: pts,
        map_classes: classes,
    }
}

const CLASS_MISMATCH_COST: f64 = 1e9;

/// Per prediction, the assigned ground-truth index. Predictions and targets
/// only pair within the same class.
pub fn match_targets(
    pred_centers: &[(f64, f64)],
    pred_classes: &[usize],
    gt_centers: &[(f64, f64)],
    gt_classes: &[usize],
    hungarian: bool,
) -> Vec<Option<usize>> {
    assert_eq!(pred_centers.len(), pred_classes.len());
    assert_eq!(gt_centers.len(), gt_classes.len());
    let np = pred_centers.len();
    let ng = gt_centers.len();
    let cost = |i: usize, j: usize| -> f64 {
        if pred_classes[i] != gt_classes[j] {
            return CLASS_MISMATCH_COST;
        }
        let dx = pred_centers[i].0 - gt_centers[j].0;
        let dy = pred_centers[i].1 - gt_centers[j].1;
        dx.hypot(dy)
    };
    let mut out = vec![None; np];
    if np == 0 || ng == 0 {
        return out;
    }
    if hungarian {
        let n = np.max(ng);
        let mut c = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                c[(i, j)] = if i < np && j < ng { cost(i, j) } else { 0.0 };
            }
        }
        let assignment = hungarian_square(&c);
        for (i, &j) in assignment.iter().enumerate() {
            if i < np && j < ng && cost(i, j) < CLASS_MISMATCH_COST {
                out[i] = Some(j);
            }
        }
    } else {
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for i in 0..np {
            for j in 0..ng {
                let d = cost(i, j);
                if d < CLASS_MISMATCH_COST {
                    pairs.push((d, i, j));
                }
            }
        }
        pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut used_gt = vec![false; ng];
        for (_, i, j) in pairs {
            if out[i].is_none() && !used_gt[j] {
                out[i] = Some(j);
                used_gt[j] = true;
            }
        }
    }
    out
}

/// Kuhn-Munkres on a square cost matrix; returns column per row.
fn hungarian_square(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols());
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Focal loss over probabilities: positives get -a(1-p)^g ln p, negatives
/// -(1-a) p^g ln(1-p). `pos` and `valid` are 0/1 indicator matrices; the
/// result is the mean over valid entries (zero when none are valid).
pub fn focal_loss(
    sess: &mut Session,
    probs: Var,
    pos: &Array2<f64>,
    valid: &Array2<f64>,
    gamma: f64,
    alpha: f64,
) -> Var {
    let count: f64 = valid.sum();
    if count == 0.0 {
        return sess.g.constant(ndarray::arr0(0.0).into_dyn());
    }
    let eps = 1e-7;
    let p = probs;
    let ln_p = sess.g.ln_clamped(p, eps);
    let neg_p = sess.g.scale(p, -1.0);
    let one_minus_p = sess.g.add_scalar(neg_p, 1.0);
    let ln_1mp = sess.g.ln_clamped(one_minus_p, eps);
    let omp_pow = sess.g.powf_const(one_minus_p, gamma);
    let p_pow = sess.g.powf_const(p, gamma);
    let pos_term = {
        let t = sess.g.mul(omp_pow, ln_p);
        sess.g.scale(t, -alpha)
    };
    let neg_term = {
        let t = sess.g.mul(p_pow, ln_1mp);
        sess.g.scale(t, -(1.0 - alpha))
    };
    let neg_ind = valid - pos;
    let pos_c = sess.g.constant(pos.clone().into_dyn());
    let neg_c = sess.g.constant(neg_ind.into_dyn());
    let a = sess.g.mul(pos_term, pos_c);
    let b = sess.g.mul(neg_term, neg_c);
    let both = sess.g.add(a, b);
    let total = sess.g.sum(both);
    sess.g.scale(total, 1.0 / count)
}

/// Mean absolute error over rows flagged in `row_mask` (zero when none).
pub fn masked_l1(sess: &mut Session, pred: Var, target: &Array2<f64>, row_mask: &[f64]) -> Var {
    let (rows, cols) = target.dim();
    assert_eq!(row_mask.len(), rows);
    let count: f64 = row_mask.iter().sum::<f64>() * cols as f64;
    if count == 0.0 {
        return sess.g.constant(ndarray::arr0(0.0).into_dyn());
    }
    let t = sess.g.constant(target.clone().into_dyn());
    let neg_t = sess.g.scale(t, -1.0);
    let diff = sess.g.add(pred, neg_t);
    let ad = sess.g.abs(diff);
    let mut mask = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            mask[(r, c)] = row_mask[r];
        }
    }
    let m = sess.g.constant(mask.into_dyn());
    let masked = sess.g.mul(ad, m);
    let total = sess.g.sum(masked);
    sess.g.scale(total, 1.0 / count)
}

/// Masked mean Euclidean distance between a [T, 2] trajectory slice and the
/// ground truth; infinity when no step is valid.
pub fn masked_mean_l2(
    trajs: &Array2<f64>,
    rows: std::ops::Range<usize>,
    gt: &Array2<f64>,
    mask: &[bool],
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (s, row) in rows.enumerate() {
        if s >= mask.len() || !mask[s] {
            continue;
        }
        let dx = trajs[(row, 0)] - gt[(s, 0)];
        let dy = trajs[(row, 1)] - gt[(s, 1)];
        total += dx.hypot(dy);
        count += 1;
    }
    if count == 0 {
        f64::INFINITY
    } else {
        total / count as f64
    }
}

/// Winner-takes-all: per agent, the mode index with the lowest masked mean
/// L2 to the ground truth (tie-break lowest index).
pub fn wta_assign(
    trajs: &Array2<f64>,
    n_a: usize,
    m: usize,
    t: usize,
    gts: &[(Array2<f64>, Vec<bool>)],
) -> Vec<usize> {
    assert_eq!(gts.len(), n_a);
    let mut winners = Vec::with_capacity(n_a);
    for a in 0..n_a {
        let (gt, mask) = &gts[a];
        let mut best = 0usize;
        let mut best_v = f64::INFINITY;
        for mo in 0..m {
            let start = (a * m + mo) * t;
            let v = masked_mean_l2(trajs, start..start + t, gt, mask);
            if v < best_v {
                best_v = v;
                best = mo;
            }
        }
        winners.push(best);
    }
    winners
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub det_reg: f64,
    pub det_cls: f64,
    pub map_reg: f64,
    pub map_cls: f64,
    pub mot_reg: f64,
    pub mot_cls: f64,
    pub plan_reg: f64,
    pub plan_cls: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, other: &LossBreakdown) {
        self.det_reg += other.det_reg;
        self.det_cls += other.det_cls;
        self.map_reg += other.map_reg;
        self.map_cls += other.map_cls;
        self.mot_reg += other.mot_reg;
        self.mot_cls += other.mot_cls;
        self.plan_reg += other.plan_reg;
        self.plan_cls += other.plan_cls;
        self.total += other.total;
    }

    fn scaled(&self, f: f64) -> LossBreakdown {
        LossBreakdown {
            det_reg: self.det_reg * f,
            det_cls: self.det_cls * f,
            map_reg: self.map_reg * f,
            map_cls: self.map_cls * f,
            mot_reg: self.mot_reg * f,
            mot_cls: self.mot_cls * f,
            plan_reg: self.plan_reg * f,
            plan_cls: self.plan_cls * f,
            total: self.total * f,
        }
    }
}

fn class_index(c: AgentClass) -> usize {
    match c {
        AgentClass::Car => 0,
        AgentClass::Pedestrian => 1,
    }
}

fn map_class_index(c: MapClass) -> usize {
    match c {
        MapClass::Divider => 0,
        MapClass::Crossing => 1,
        MapClass::Boundary => 2,
    }
}

/// Weighted frame loss. In the perception stage only detection and map
/// terms contribute to the total (and thus to the gradient).
pub fn total_loss(
    sess: &mut Session,
    out: &FrameOutput,
    frame: &ObservationFrame,
    truth: &FrameTruth,
    cfg: &RunConfig,
) -> Result<(Var, LossBreakdown)> {
    let tc = &cfg.train;
    let dims = &cfg.dims;
    let (gamma, alpha) = (tc.focal_gamma, tc.focal_alpha);

    // detection: class-aware center matching against true boxes
    let n = out.objset.len();
    let boxes_val = sess.g.value2(out.objset.boxes);
    let pred_centers: Vec<(f64, f64)> = (0..n).map(|i| (boxes_val[(i, 0)], boxes_val[(i, 1)])).collect();
    let pred_classes: Vec<usize> = out.objset.classes.iter().map(|&c| class_index(c)).collect();
    let gt_centers: Vec<(f64, f64)> = truth.boxes.iter().map(|(_, _, b)| (b.x, b.y)).collect();
    let gt_classes: Vec<usize> = truth.boxes.iter().map(|(_, c, _)| class_index(*c)).collect();
    let assignment = match_targets(
        &pred_centers,
        &pred_classes,
        &gt_centers,
        &gt_classes,
        tc.hungarian_matching,
    );
    let mut det_target = Array2::zeros((n, 11));
    let mut det_row_mask = vec![0.0; n];
    let mut det_pos = Array2::zeros((n, 1));
    let det_valid = Array2::ones((n, 1));
    for i in 0..n {
        if let Some(j) = assignment[i] {
            det_row_mask[i] = 1.0;
            det_pos[(i, 0)] = 1.0;
            let arr = truth.boxes[j].2.to_array();
            for c in 0..11 {
                det_target[(i, c)] = arr[c];
            }
        }
    }
    let det_reg = masked_l1(sess, out.objset.boxes, &det_target, &det_row_mask);
    let det_cls = focal_loss(sess, out.objset.scores, &det_pos, &det_valid, gamma, alpha);

    // map: same matching over polyline centers
    let nm = out.maps.n_map;
    let p = dims.map_points;
    let map_val = sess.g.value2(out.maps.points);
    let pred_map_centers: Vec<(f64, f64)> = (0..nm)
        .map(|i| {
            let mut cx = 0.0;
            let mut cy = 0.0;
            for k in 0..p {
                cx += map_val[(i * p + k, 0)];
                cy += map_val[(i * p + k, 1)];
            }
            (cx / p as f64, cy / p as f64)
        })
        .collect();
    let pred_map_classes: Vec<usize> = out
        .maps
        .observed_classes
        .iter()
        .map(|&c| map_class_index(c))
        .collect();
    let gt_map_centers: Vec<(f64, f64)> = truth
        .map_points
        .iter()
        .map(|arr| {
            let cx = arr.column(0).mean().unwrap_or(0.0);
            let cy = arr.column(1).mean().unwrap_or(0.0);
            (cx, cy)
        })
        .collect();
    let gt_map_classes: Vec<usize> = truth.map_classes.iter().map(|&c| map_class_index(c)).collect();
    let map_assignment = match_targets(
        &pred_map_centers,
        &pred_map_classes,
        &gt_map_centers,
        &gt_map_classes,
        tc.hungarian_matching,
    );
    let mut map_target = Array2::zeros((nm * p, 2));
    let mut map_row_mask = vec![0.0; nm * p];
    let mut map_pos = Array2::zeros((nm, 3));
    let mut map_valid = Array2::zeros((nm, 3));
    for i in 0..nm {
        if let Some(j) = map_assignment[i] {
            for k in 0..p {
                map_row_mask[i * p + k] = 1.0;
                map_target[(i * p + k, 0)] = truth.map_points[j][(k, 0)];
                map_target[(i * p + k, 1)] = truth.map_points[j][(k, 1)];
            }
            for c in 0..3 {
                map_valid[(i, c)] = 1.0;
            }
            map_pos[(i, gt_map_classes[j])] = 1.0;
        }
    }
    let map_reg = masked_l1(sess, out.maps.points, &map_target, &map_row_mask);
    let map_probs = sess.g.softmax_rows(out.maps.class_logits);
    let map_cls = focal_loss(sess, map_probs, &map_pos, &map_valid, gamma, alpha);

    // motion: winner-takes-all over modes, per agent
    if frame.agent_obs.len() != n {
        return Err(Error::Alignment(format!(
            "loss: {} observations but {} object queries",
            frame.agent_obs.len(),
            n
        )));
    }
    let (m, t) = (out.motion.m_mot, out.motion.t_mot);
    let mot_val = sess.g.value2(out.motion_dec.trajs);
    let winners = wta_assign(&mot_val, n, m, t, &frame.gt_futures);
    let mut mot_target = Array2::zeros((n * m * t, 2));
    let mut mot_row_mask = vec![0.0; n * m * t];
    let mut mot_pos = Array2::zeros((n, m));
    let mut mot_valid = Array2::zeros((n, m));
    for a in 0..n {
        let (gt, mask) = &frame.gt_futures[a];
        let win = winners[a];
        for mo in 0..m {
            mot_valid[(a, mo)] = 1.0;
        }
        mot_pos[(a, win)] = 1.0;
        for s in 0..t {
            if mask[s] {
                let row = (a * m + win) * t + s;
                mot_row_mask[row] = 1.0;
                mot_target[(row, 0)] = gt[(s, 0)];
                mot_target[(row, 1)] = gt[(s, 1)];
            }
        }
    }
    let mot_reg = masked_l1(sess, out.motion_dec.trajs, &mot_target, &mot_row_mask);
    let mot_cls = focal_loss(sess, out.motion_dec.probs, &mot_pos, &mot_valid, gamma, alpha);

    // planning: winner-takes-all within the commanded group
    let (mp, tp) = (out.plan.m_plan, out.plan.t_plan);
    let plan_val = sess.g.value2(out.plan_dec.trajs);
    let group_modes = out.plan.modes_for(frame.command);
    let (ego_gt, ego_mask) = &frame.gt_ego_future;
    let mut plan_win = group_modes[0];
    let mut best_v = f64::INFINITY;
    for &mo in &group_modes {
        let start = mo * tp;
        let v = masked_mean_l2(&plan_val, start..start + tp, ego_gt, ego_mask);
        if v < best_v {
            best_v = v;
            plan_win = mo;
        }
    }
    let mut plan_target = Array2::zeros((mp * tp, 2));
    let mut plan_row_mask = vec![0.0; mp * tp];
    for s in 0..tp {
        if ego_mask[s] {
            let row = plan_win * tp + s;
            plan_row_mask[row] = 1.0;
            plan_target[(row, 0)] = ego_gt[(s, 0)];
            plan_target[(row, 1)] = ego_gt[(s, 1)];
        }
    }
    let mut plan_pos = Array2::zeros((1, mp));
    let mut plan_valid = Array2::zeros((1, mp));
    for &mo in &group_modes {
        plan_valid[(0, mo)] = 1.0;
    }
    plan_pos[(0, plan_win)] = 1.0;
    let plan_reg = masked_l1(sess, out.plan_dec.trajs, &plan_target, &plan_row_mask);
    let plan_cls = focal_loss(sess, out.plan_dec.probs, &plan_pos, &plan_valid, gamma, alpha);

    // weighted sum; the perception stage drops prediction/planning terms
    let (w_mot_reg, w_mot_cls, w_plan_reg, w_plan_cls) = match tc.stage {
        TrainStage::Perception => (0.0, 0.0, 0.0, 0.0),
        TrainStage::EndToEnd => (
            tc.lambda_mot_reg,
            tc.lambda_mot_cls,
            tc.lambda_plan_reg,
            tc.lambda_plan_cls,
        ),
    };
    let terms = [
        (det_reg, tc.lambda_det_reg),
        (det_cls, tc.lambda_det_cls),
        (map_reg, tc.lambda_map_reg),
        (map_cls, tc.lambda_map_cls),
        (mot_reg, w_mot_reg),
        (mot_cls, w_mot_cls),
        (plan_reg, w_plan_reg),
        (plan_cls, w_plan_cls),
    ];
    let mut total: Option<Var> = None;
    for (v, w) in terms {
        if w == 0.0 {
            continue;
        }
        let scaled = sess.g.scale(v, w);
        total = Some(match total {
            Some(acc) => sess.g.add(acc, scaled),
            None => scaled,
        });
    }
    let total = total.unwrap_or_else(|| sess.g.constant(ndarray::arr0(0.0).into_dyn()));

    let breakdown = LossBreakdown {
        det_reg: sess.g.scalar(det_reg),
        det_cls: sess.g.scalar(det_cls),
        map_reg: sess.g.scalar(map_reg),
        map_cls: sess.g.scalar(map_cls),
        mot_reg: sess.g.scalar(mot_reg),
        mot_cls: sess.g.scalar(mot_cls),
        plan_reg: sess.g.scalar(plan_reg),
        plan_cls: sess.g.scalar(plan_cls),
        total: sess.g.scalar(total),
    };
    Ok((total, breakdown))
}

/// Deterministic per-frame observation seed.
pub fn obs_seed(base: u64, scenario_seed: u64, epoch: u64, frame: u64) -> u64 {
    let mut h = base ^ 0x9e3779b97f4a7c15;
    for x in [scenario_seed, epoch, frame] {
        h ^= x.wrapping_mul(0xff51afd7ed558ccd).rotate_left(31);
        h = h.wrapping_mul(0xc4ceb9fe1a85ec53);
    }
    h
}

/// Streaming training over scenarios. One optimizer step per frame; the
/// memory queue resets between scenarios. Returns the per-epoch mean loss
/// breakdown.
pub fn train(model: &mut BridgeModel, scenarios: &[Scenario]) -> Result<Vec<LossBreakdown>> {
    let cfg = model.cfg.clone();
    let tc = &cfg.train;
    let frames_per: usize = scenarios
        .iter()
        .map(|s| s.frame_count().min(tc.max_frames_per_scenario))
        .sum();
    let total_steps = tc.epochs * frames_per;
    let mut opt = AdamW::new(tc.base_lr, tc.weight_decay, total_steps.max(1));
    let mut epoch_reports = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let mut sum = LossBreakdown::default();
        let mut frames_seen = 0usize;
        for scenario in scenarios {
            let mut queue = MemoryQueue::new(cfg.dims.k_history);
            let mut tracks: Option<TrackTable> = None;
            let mut next_id = 0i64;
            let mut world = WorldState::from_scenario(scenario);
            let frame_count = scenario.frame_count().min(tc.max_frames_per_scenario);
            for f in 0..frame_count {
                let seed = obs_seed(tc.seed, scenario.seed, epoch as u64, f as u64);
                let frame = observe(
                    &world,
                    &cfg.noise,
                    seed,
                    cfg.dims.t_mot,
                    cfg.dims.t_plan,
                    cfg.dims.map_points,
                );
                let truth = frame_truth(&world, cfg.dims.map_points);
                let mut sess = Session::new(&model.store);
                let out = model.forward_frame(&mut sess, &frame, &queue, tracks.as_ref(), &mut next_id)?;
                let (loss, breakdown) = total_loss(&mut sess, &out, &frame, &truth, &cfg)?;
                if !breakdown.total.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite loss at epoch {epoch}, scenario {}, frame {f}",
                        scenario.seed
                    )));
                }
                let grads: HashMap<String, ArrayD<f64>> = sess.param_grads(loss);
                opt.step(&mut model.store, &grads);
                tracks = Some(out.tracks);
                queue.push(out.cache)?;
                sum.accumulate(&breakdown);
                frames_seen += 1;
                world = step_world(&world, cfg.frame_dt)?;
            }
        }
        epoch_reports.push(sum.scaled(1.0 / frames_seen.max(1) as f64));
    }
    Ok(epoch_reports)
}
