//! Open-loop planning/prediction metrics and the closed-loop rollout
//! harness with its safety score.
//!
//! Open loop: displacement error against the logged ego future, a
//! heading-aware box collision check against ground-truth agent futures,
//! and min-ADE/FDE/miss-rate for multi-modal motion prediction. Closed
//! loop: the policy replans at the keyframe rate while a finer-grained
//! tracker drives a unicycle ego through the live scene.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::{boxes_overlap, normalize_angle, OrientedBox2, Pose2};
use crate::memory::MemoryQueue;
use crate::model::{BridgeModel, Policy};
use crate::nn::Session;
use crate::par::Strategy;
use crate::perception::TrackTable;
use crate::planner::select_by_command;
use crate::scene::{observe, step_world, ObservationFrame, Scenario, WorldState};
use crate::training::obs_seed;

pub const EGO_LENGTH: f64 = 4.08;
pub const EGO_WIDTH: f64 = 1.73;
pub const MISS_THRESHOLD: f64 = 2.0;
const EVAL_SEED_SALT: u64 = 1_000_003;

/// Mean displacement error up to `horizon_steps` (both inclusive bounds in
/// valid steps); `at_step` instead evaluates only the final step of the
/// horizon. None when no step in range is valid.
pub fn l2_error(
    pred: &Array2<f64>,
    gt: &Array2<f64>,
    mask: &[bool],
    horizon_steps: usize,
    at_step: bool,
) -> Option<f64> {
    assert!(horizon_steps >= 1 && horizon_steps <= pred.nrows());
    let range = if at_step {
        horizon_steps - 1..horizon_steps
    } else {
        0..horizon_steps
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for s in range {
        if !mask[s] {
            continue;
        }
        let dx = pred[(s, 0)] - gt[(s, 0)];
        let dy = pred[(s, 1)] - gt[(s, 1)];
        total += dx.hypot(dy);
        count += 1;
    }
    (count > 0).then(|| total / count as f64)
}

/// Per-step headings: direction to the next waypoint, starting from the
/// first point's direction out of the origin. Zero-length segments reuse
/// the previous heading, as does the final step.
pub fn step_headings(traj: &Array2<f64>, initial: f64) -> Vec<f64> {
    let t = traj.nrows();
    let mut out = Vec::with_capacity(t);
    let mut prev = initial;
    for s in 0..t {
        let (ax, ay) = if s == 0 {
            (0.0, 0.0)
        } else {
            (traj[(s - 1, 0)], traj[(s - 1, 1)])
        };
        let (bx, by) = (traj[(s, 0)], traj[(s, 1)]);
        let (dx, dy) = (bx - ax, by - ay);
        if dx.hypot(dy) > 1e-9 {
            prev = dy.atan2(dx);
        }
        out.push(prev);
    }
    out
}

/// Oriented agent boxes at every future step, derived from ground-truth
/// future positions (headings from consecutive positions).
fn agent_future_boxes(
    frame: &ObservationFrame,
    scenario: &Scenario,
    steps: usize,
) -> Vec<(Vec<OrientedBox2>, Vec<bool>)> {
    frame
        .agent_obs
        .iter()
        .zip(frame.gt_futures.iter())
        .map(|(obs, (gt, mask))| {
            let truth = scenario
                .agents
                .iter()
                .find(|a| a.agent_id == obs.agent_id)
                .expect("observed agent exists in scenario");
            let headings = step_headings(gt, obs.box11.yaw());
            let boxes = (0..steps.min(gt.nrows()))
                .map(|s| {
                    OrientedBox2::new(gt[(s, 0)], gt[(s, 1)], truth.length, truth.width, headings[s])
                })
                .collect();
            (boxes, mask[..steps.min(mask.len())].to_vec())
        })
        .collect()
}

/// Steps (0-based) at which the planned ego box overlaps any ground-truth
/// agent box.
pub fn collision_steps(
    plan: &Array2<f64>,
    plan_mask: &[bool],
    agents: &[(Vec<OrientedBox2>, Vec<bool>)],
) -> Vec<usize> {
    let headings = step_headings(plan, 0.0);
    let mut out = Vec::new();
    for s in 0..plan.nrows() {
        if !plan_mask[s] {
            continue;
        }
        let ego = OrientedBox2::new(plan[(s, 0)], plan[(s, 1)], EGO_LENGTH, EGO_WIDTH, headings[s]);
        let hit = agents.iter().any(|(boxes, mask)| {
            s < boxes.len() && mask[s] && boxes_overlap(&ego, &boxes[s])
        });
        if hit {
            out.push(s);
        }
    }
    out
}

/// Multi-modal prediction quality for one agent: (min-ADE, min-FDE), where
/// the final displacement uses the last valid step. None when nothing is
/// valid.
pub fn min_ade_fde(
    trajs: &Array2<f64>,
    modes: usize,
    t: usize,
    gt: &Array2<f64>,
    mask: &[bool],
) -> Option<(f64, f64)> {
    let last_valid = (0..t).rev().find(|&s| mask[s])?;
    let mut best_ade = f64::INFINITY;
    let mut best_fde = f64::INFINITY;
    for m in 0..modes {
        let mut total = 0.0;
        let mut count = 0usize;
        for s in 0..t {
            if !mask[s] {
                continue;
            }
            let row = m * t + s;
            total += (trajs[(row, 0)] - gt[(s, 0)]).hypot(trajs[(row, 1)] - gt[(s, 1)]);
            count += 1;
        }
        let ade = total / count as f64;
        let row = m * t + last_valid;
        let fde = (trajs[(row, 0)] - gt[(last_valid, 0)]).hypot(trajs[(row, 1)] - gt[(last_valid, 1)]);
        best_ade = best_ade.min(ade);
        best_fde = best_fde.min(fde);
    }
    Some((best_ade, best_fde))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct OpenLoopReport {
    pub config_hash: String,
    /// Per horizon second: (seconds, mean L2 meters).
    pub l2_by_horizon: Vec<(f64, f64)>,
    pub l2_avg: f64,
    /// Per horizon second: fraction of frames with a collision within the
    /// horizon.
    pub collision_by_horizon: Vec<(f64, f64)>,
    pub collision_rate: f64,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub frames: usize,
    pub agents_scored: usize,
}

#[derive(Clone, Debug, Default)]
struct OpenLoopSums {
    l2_sums: Vec<f64>,
    l2_counts: Vec<usize>,
    collision_counts: Vec<usize>,
    frames: usize,
    ade_sum: f64,
    fde_sum: f64,
    misses: usize,
    agents: usize,
}

impl OpenLoopSums {
    fn new(horizons: usize) -> Self {
        OpenLoopSums {
            l2_sums: vec![0.0; horizons],
            l2_counts: vec![0; horizons],
            collision_counts: vec![0; horizons],
            ..Default::default()
        }
    }

    fn merge(&mut self, o: &OpenLoopSums) {
        for i in 0..self.l2_sums.len() {
            self.l2_sums[i] += o.l2_sums[i];
            self.l2_counts[i] += o.l2_counts[i];
            self.collision_counts[i] += o.collision_counts[i];
        }
        self.frames += o.frames;
        self.ade_sum += o.ade_sum;
        self.fde_sum += o.fde_sum;
        self.misses += o.misses;
        self.agents += o.agents;
    }
}

/// Open-loop evaluation: replay scenarios, plan at every frame, and compare
/// against logged futures. `at_step` switches the L2 convention from
/// mean-up-to-horizon to displacement-at-horizon.
pub fn run_open_loop(
    model: &BridgeModel,
    scenarios: &[Scenario],
    at_step: bool,
    strategy: Strategy,
) -> Result<OpenLoopReport> {
    let cfg = &model.cfg;
    let t_plan = cfg.dims.t_plan;
    let steps_per_second = (1.0 / cfg.frame_dt).round() as usize;
    let horizons: Vec<usize> = (1..=t_plan / steps_per_second)
        .map(|h| h * steps_per_second)
        .collect();
    if horizons.is_empty() {
        return Err(Error::Evaluation(
            "planning horizon shorter than one second".to_string(),
        ));
    }
    let results: Vec<Result<OpenLoopSums>> = strategy.map(scenarios.to_vec(), |scenario| {
        open_loop_scenario(model, &scenario, &horizons, at_step)
    });
    let mut sums = OpenLoopSums::new(horizons.len());
    for r in results {
        sums.merge(&r?);
    }
    let l2_by_horizon: Vec<(f64, f64)> = horizons
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            (
                h as f64 * cfg.frame_dt,
                sums.l2_sums[i] / sums.l2_counts[i].max(1) as f64,
            )
        })
        .collect();
    let collision_by_horizon: Vec<(f64, f64)> = horizons
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            (
                h as f64 * cfg.frame_dt,
                sums.collision_counts[i] as f64 / sums.frames.max(1) as f64,
            )
        })
        .collect();
    let l2_avg = l2_by_horizon.iter().map(|(_, v)| v).sum::<f64>() / l2_by_horizon.len() as f64;
    let collision_rate = collision_by_horizon.last().map(|&(_, v)| v).unwrap_or(0.0);
    Ok(OpenLoopReport {
        config_hash: cfg.hash(),
        l2_by_horizon,
        l2_avg,
        collision_by_horizon,
        collision_rate,
        min_ade: sums.ade_sum / sums.agents.max(1) as f64,
        min_fde: sums.fde_sum / sums.agents.max(1) as f64,
        miss_rate: sums.misses as f64 / sums.agents.max(1) as f64,
        frames: sums.frames,
        agents_scored: sums.agents,
    })
}

fn open_loop_scenario(
    model: &BridgeModel,
    scenario: &Scenario,
    horizons: &[usize],
    at_step: bool,
) -> Result<OpenLoopSums> {
    let cfg = &model.cfg;
    let mut sums = OpenLoopSums::new(horizons.len());
    let mut queue = MemoryQueue::new(cfg.dims.k_history);
    let mut tracks: Option<TrackTable> = None;
    let mut next_id = 0i64;
    let mut world = WorldState::from_scenario(scenario);
    let t_plan = cfg.dims.t_plan;
    // stop early enough that the full horizon has ground truth
    let frames = scenario.frame_count().saturating_sub(t_plan);
    for f in 0..frames {
        let seed = obs_seed(cfg.scenario_seed, scenario.seed, EVAL_SEED_SALT, f as u64);
        let frame = observe(&world, &cfg.noise, seed, cfg.dims.t_mot, t_plan, cfg.dims.map_points);
        let mut sess = Session::new(&model.store);
        let out = model.forward_frame(&mut sess, &frame, &queue, tracks.as_ref(), &mut next_id)?;
        let trajs = sess.g.value2(out.plan_dec.trajs);
        let probs = sess.g.value2(out.plan_dec.probs);
        let (_, plan) = select_by_command(&out.plan, &trajs, &probs, frame.command)?;
        let (ego_gt, ego_mask) = &frame.gt_ego_future;

        let agents = agent_future_boxes(&frame, scenario, t_plan);
        let hits = collision_steps(&plan, ego_mask, &agents);
        for (i, &h) in horizons.iter().enumerate() {
            if let Some(v) = l2_error(&plan, ego_gt, ego_mask, h, at_step) {
                sums.l2_sums[i] += v;
                sums.l2_counts[i] += 1;
            }
            if hits.iter().any(|&s| s < h) {
                sums.collision_counts[i] += 1;
            }
        }
        sums.frames += 1;

        let mot = sess.g.value2(out.motion_dec.trajs);
        let (mm, mt) = (out.motion.m_mot, out.motion.t_mot);
        for (a, (gt, mask)) in frame.gt_futures.iter().enumerate() {
            let agent_rows = mot.slice(ndarray::s![a * mm * mt..(a + 1) * mm * mt, ..]);
            if let Some((ade, fde)) = min_ade_fde(&agent_rows.to_owned(), mm, mt, gt, mask) {
                sums.ade_sum += ade;
                sums.fde_sum += fde;
                sums.misses += usize::from(fde > MISS_THRESHOLD);
                sums.agents += 1;
            }
        }

        tracks = Some(out.tracks);
        queue.push(out.cache)?;
        world = step_world(&world, cfg.frame_dt)?;
    }
    Ok(sums)
}

pub const SIM_DT: f64 = 0.1;
pub const EGO_MAX_ACCEL: f64 = 4.0;
pub const EGO_MAX_YAW_RATE: f64 = 0.5;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClosedLoopResult {
    pub collided: bool,
    /// Relative speed at first contact, when collided.
    pub impact_speed: f64,
    pub sim_seconds: f64,
    pub distance_traveled: f64,
    pub final_pose: Pose2,
}

/// Drive one scenario closed-loop: the policy replans at the keyframe rate,
/// a unicycle tracker follows its first waypoint at 10 Hz with bounded
/// acceleration and yaw rate, and the rollout ends at the scenario horizon
/// or first contact.
pub fn run_closed_loop(
    scenario: &Scenario,
    policy: &mut dyn Policy,
    cfg: &RunConfig,
) -> Result<ClosedLoopResult> {
    policy.reset();
    let mut world = WorldState::from_scenario(scenario);
    world.ego_scripted = false;
    let substeps = (cfg.frame_dt / SIM_DT).round() as usize;
    let frames = scenario.frame_count();
    let mut distance = 0.0;
    for f in 0..frames {
        let seed = obs_seed(cfg.scenario_seed, scenario.seed, EVAL_SEED_SALT + 1, f as u64);
        let frame = observe(&world, &cfg.noise, seed, cfg.dims.t_mot, cfg.dims.t_plan, cfg.dims.map_points);
        let waypoints = policy.plan(&frame)?;
        if waypoints.nrows() == 0 {
            return Err(Error::Evaluation("policy returned no waypoints".to_string()));
        }
        // first waypoint in world coordinates; reached at the end of the
        // replan interval
        let target = world
            .ego_pose
            .transform_point((waypoints[(0, 0)], waypoints[(0, 1)]));
        for sub in 0..substeps {
            let remaining = cfg.frame_dt - sub as f64 * SIM_DT;
            let dx = target.0 - world.ego_pose.x;
            let dy = target.1 - world.ego_pose.y;
            let dist = dx.hypot(dy);
            let heading_err = if dist > 1e-6 {
                normalize_angle(dy.atan2(dx) - world.ego_pose.yaw)
            } else {
                0.0
            };
            // a target at or behind the ego means stop, not turn around
            let reachable = dist > 0.3 && heading_err.abs() < std::f64::consts::FRAC_PI_2;
            let desired_speed = if reachable { dist / remaining.max(SIM_DT) } else { 0.0 };
            let accel = ((desired_speed - world.ego_speed) / SIM_DT)
                .clamp(-EGO_MAX_ACCEL, EGO_MAX_ACCEL);
            let new_speed = (world.ego_speed + accel * SIM_DT).max(0.0);
            let yaw_rate = (heading_err / SIM_DT).clamp(-EGO_MAX_YAW_RATE, EGO_MAX_YAW_RATE);
            let new_yaw = normalize_angle(world.ego_pose.yaw + yaw_rate * SIM_DT);
            let step_len = new_speed * SIM_DT;
            let pose = Pose2::new(
                world.ego_pose.x + step_len * new_yaw.cos(),
                world.ego_pose.y + step_len * new_yaw.sin(),
                new_yaw,
            );
            distance += step_len;
            world.ego_pose = pose;
            world.ego_speed = new_speed;
            world = step_world(&world, SIM_DT)?;
            if let Some(impact) = first_contact(&world) {
                return Ok(ClosedLoopResult {
                    collided: true,
                    impact_speed: impact,
                    sim_seconds: world.time,
                    distance_traveled: distance,
                    final_pose: world.ego_pose,
                });
            }
        }
    }
    Ok(ClosedLoopResult {
        collided: false,
        impact_speed: 0.0,
        sim_seconds: world.time,
        distance_traveled: distance,
        final_pose: world.ego_pose,
    })
}

/// Relative speed against the first agent whose box overlaps the ego box.
fn first_contact(world: &WorldState) -> Option<f64> {
    let ego = OrientedBox2::new(
        world.ego_pose.x,
        world.ego_pose.y,
        EGO_LENGTH,
        EGO_WIDTH,
        world.ego_pose.yaw,
    );
    for a in &world.agents {
        let b = OrientedBox2::new(a.pose.x, a.pose.y, a.truth.length, a.truth.width, a.pose.yaw);
        if boxes_overlap(&ego, &b) {
            let (evx, evy) = (
                world.ego_speed * world.ego_pose.yaw.cos(),
                world.ego_speed * world.ego_pose.yaw.sin(),
            );
            let (avx, avy) = (a.speed * a.pose.yaw.cos(), a.speed * a.pose.yaw.sin());
            return Some((evx - avx).hypot(evy - avy));
        }
    }
    None
}

/// Safety score in [0, 5]: 5 with no collision, otherwise scaled by how
/// much slower the impact was than the non-reactive reference's impact
/// (`v_r`, falling back to the scenario cruise speed when the reference
/// rollout never collides).
pub fn nns_score(result: &ClosedLoopResult, reference: &ClosedLoopResult, fallback_speed: f64) -> f64 {
    if !result.collided {
        return 5.0;
    }
    let v_r = if reference.collided {
        reference.impact_speed
    } else {
        fallback_speed
    };
    if v_r <= 0.0 {
        return 0.0;
    }
    4.0 * (1.0 - result.impact_speed / v_r).max(0.0)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClosedLoopReport {
    pub config_hash: String,
    pub mean_score: f64,
    pub collision_fraction: f64,
    pub per_scenario: Vec<(u64, f64)>,
}

/// Closed-loop evaluation of the model against the constant-speed
/// reference on every scenario.
pub fn run_closed_loop_suite(
    model: &BridgeModel,
    scenarios: &[Scenario],
    strategy: Strategy,
) -> Result<ClosedLoopReport> {
    let cfg = &model.cfg;
    let results: Vec<Result<(u64, f64, bool)>> = strategy.map(scenarios.to_vec(), |scenario| {
        let mut policy = crate::model::ModelPolicy::new(model);
        let run = run_closed_loop(&scenario, &mut policy, cfg)?;
        let mut reference = crate::model::ConstantSpeedPolicy {
            t_plan: cfg.dims.t_plan,
            frame_dt: cfg.frame_dt,
        };
        let ref_run = run_closed_loop(&scenario, &mut reference, cfg)?;
        let score = nns_score(&run, &ref_run, scenario.ego.speed);
        Ok((scenario.seed, score, run.collided))
    });
    let mut per_scenario = Vec::new();
    let mut collisions = 0usize;
    for r in results {
        let (seed, score, collided) = r?;
        per_scenario.push((seed, score));
        collisions += usize::from(collided);
    }
    let mean_score =
        per_scenario.iter().map(|(_, s)| s).sum::<f64>() / per_scenario.len().max(1) as f64;
    Ok(ClosedLoopReport {
        config_hash: cfg.hash(),
        mean_score,
        collision_fraction: collisions as f64 / per_scenario.len().max(1) as f64,
        per_scenario,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelDims;
    use crate::model::{ConstantSpeedPolicy, FullStopPolicy};
    use crate::scene::{generate_scenario, ScenarioTemplate};
    use ndarray::arr2;

    #[test]
    fn l2_mean_and_at_step_conventions() {
        let pred = arr2(&[[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]);
        let gt = arr2(&[[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]]);
        let mask = vec![true, true, true];
        assert!((l2_error(&pred, &gt, &mask, 3, false).unwrap() - 2.0).abs() < 1e-12);
        assert!((l2_error(&pred, &gt, &mask, 3, true).unwrap() - 3.0).abs() < 1e-12);
        assert!((l2_error(&pred, &gt, &mask, 2, false).unwrap() - 1.5).abs() < 1e-12);
        assert!(l2_error(&pred, &gt, &[false, false, false], 3, false).is_none());
        // invalid middle step drops out of the mean
        let m = vec![true, false, true];
        assert!((l2_error(&pred, &gt, &m, 3, false).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn headings_follow_segments_and_reuse_previous() {
        let traj = arr2(&[[1.0, 0.0], [1.0, 1.0], [1.0, 1.0]]);
        let h = step_headings(&traj, 0.0);
        assert!((h[0] - 0.0).abs() < 1e-12);
        assert!((h[1] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        // zero-length final segment keeps the previous heading
        assert!((h[2] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        // all-zero trajectory keeps the initial heading
        let still = Array2::zeros((3, 2));
        assert!(step_headings(&still, 0.7).iter().all(|&x| (x - 0.7).abs() < 1e-12));
    }

    #[test]
    fn collision_detects_overlap_and_respects_masks() {
        // ego drives straight through a stationary box at x = 5
        let plan = arr2(&[[2.0, 0.0], [4.0, 0.0], [6.0, 0.0]]);
        let boxes: Vec<OrientedBox2> = (0..3)
            .map(|_| OrientedBox2::new(7.1, 0.0, 4.0, 2.0, 0.0))
            .collect();
        let agents = vec![(boxes.clone(), vec![true, true, true])];
        let hits = collision_steps(&plan, &[true, true, true], &agents);
        assert_eq!(hits, vec![1, 2]);
        // masked agent steps are ignored
        let agents = vec![(boxes, vec![true, false, false])];
        let hits = collision_steps(&plan, &[true, true, true], &agents);
        assert!(hits.is_empty());
        // heading matters: a thin box parallel to a sideways ego misses
        let plan = arr2(&[[0.0, 3.0]]);
        let thin = OrientedBox2::new(3.0, 3.0, 4.0, 0.6, 0.0);
        let agents = vec![(vec![thin.clone(), thin], vec![true, true])];
        // moving along +y the ego is narrow in x: no overlap
        assert!(collision_steps(&plan, &[true], &agents).is_empty());
        // same geometry but ego heading forced along +x by a leading point
        let plan = arr2(&[[0.0, 3.0], [1.2, 3.0]]);
        let hits = collision_steps(&plan, &[true, true], &agents);
        assert_eq!(hits, vec![1]);
    }

    #[test]
    fn ade_fde_oracle() {
        let t = 2;
        // mode 0 constant offset 1; mode 1 offset 3 except final step 0.5
        let trajs = arr2(&[[1.0, 0.0], [1.0, 0.0], [3.0, 0.0], [0.5, 0.0]]);
        let gt = arr2(&[[0.0, 0.0], [0.0, 0.0]]);
        let (ade, fde) = min_ade_fde(&trajs, 2, t, &gt, &[true, true]).unwrap();
        assert!((ade - 1.0).abs() < 1e-12);
        assert!((fde - 0.5).abs() < 1e-12);
        assert!(min_ade_fde(&trajs, 2, t, &gt, &[false, false]).is_none());
        // mask limits FDE to the last valid step
        let (_, fde) = min_ade_fde(&trajs, 2, t, &gt, &[true, false]).unwrap();
        assert!((fde - 1.0).abs() < 1e-12);
    }

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.dims = ModelDims {
            channels: 8,
            decoder_layers: 1,
            m_mot: 2,
            t_mot: 6,
            m_plan: 6,
            t_plan: 6,
            k_history: 2,
            t_m2m: 3,
            t_p2p: 3,
            ..ModelDims::default()
        };
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn open_loop_parallel_matches_sequential() {
        let cfg = tiny_cfg();
        let model = BridgeModel::new(cfg);
        let scenarios: Vec<Scenario> = (0..3)
            .map(|s| generate_scenario(s, ScenarioTemplate::OpenLoopRandom))
            .collect();
        let a = run_open_loop(&model, &scenarios, false, Strategy::Sequential).unwrap();
        let b = run_open_loop(&model, &scenarios, false, Strategy::Parallel).unwrap();
        assert_eq!(a.l2_avg.to_bits(), b.l2_avg.to_bits());
        assert_eq!(a.collision_rate.to_bits(), b.collision_rate.to_bits());
        assert_eq!(a.min_ade.to_bits(), b.min_ade.to_bits());
        assert!(a.frames > 0 && a.agents_scored > 0);
        assert_eq!(a.l2_by_horizon.len(), 3);
    }

    #[test]
    fn closed_loop_full_stop_avoids_blockage() {
        let cfg = tiny_cfg();
        let scenario = generate_scenario(1, ScenarioTemplate::StationaryBlockage);
        let mut stop = FullStopPolicy { t_plan: cfg.dims.t_plan };
        let r = run_closed_loop(&scenario, &mut stop, &cfg).unwrap();
        assert!(!r.collided);
        assert!(r.distance_traveled < 12.0);
    }

    #[test]
    fn closed_loop_constant_speed_hits_blockage() {
        let cfg = tiny_cfg();
        let scenario = generate_scenario(1, ScenarioTemplate::StationaryBlockage);
        let mut cruise = ConstantSpeedPolicy {
            t_plan: cfg.dims.t_plan,
            frame_dt: cfg.frame_dt,
        };
        let r = run_closed_loop(&scenario, &mut cruise, &cfg).unwrap();
        assert!(r.collided);
        assert!(r.impact_speed > 1.0);
    }

    #[test]
    fn nns_bounds_and_reference_scaling() {
        let hit = ClosedLoopResult {
            collided: true,
            impact_speed: 2.0,
            sim_seconds: 1.0,
            distance_traveled: 5.0,
            final_pose: Pose2::identity(),
        };
        let miss = ClosedLoopResult {
            collided: false,
            impact_speed: 0.0,
            ..hit.clone()
        };
        let ref_hit = ClosedLoopResult {
            impact_speed: 8.0,
            ..hit.clone()
        };
        assert_eq!(nns_score(&miss, &ref_hit, 8.0), 5.0);
        let s = nns_score(&hit, &ref_hit, 8.0);
        assert!((s - 3.0).abs() < 1e-12);
        // harder impact than the reference floors at zero
        let worse = ClosedLoopResult {
            impact_speed: 10.0,
            ..hit.clone()
        };
        assert_eq!(nns_score(&worse, &ref_hit, 8.0), 0.0);
        // reference without collision falls back to the given speed
        let s = nns_score(&hit, &miss, 4.0);
        assert!((s - 2.0).abs() < 1e-12);
    }

    #[test]
    fn closed_loop_is_deterministic() {
        let cfg = tiny_cfg();
        let model = BridgeModel::new(cfg);
        let scenarios: Vec<Scenario> = (0..2)
            .map(|s| generate_scenario(s, ScenarioTemplate::FrontalAdversary))
            .collect();
        let a = run_closed_loop_suite(&model, &scenarios, Strategy::Sequential).unwrap();
        let b = run_closed_loop_suite(&model, &scenarios, Strategy::Parallel).unwrap();
        assert_eq!(a.mean_score.to_bits(), b.mean_score.to_bits());
        assert_eq!(a.per_scenario, b.per_scenario);
        assert!(a.mean_score >= 0.0 && a.mean_score <= 5.0);
    }
}
