//! Procedural driving worlds: scripted agents, vectorized maps, an ego route
//! with a car-following speed profile, and noisy observation frames that
//! stand in for an image pipeline.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::NoiseConfig;
use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Pose2};
use crate::perception::AnchorBox11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentClass {
    Car,
    Pedestrian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    ConstantVelocity,
    LaneFollow,
    ScriptedAdversary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Left,
    Right,
    Straight,
}

impl Command {
    pub fn group_index(self) -> usize {
        match self {
            Command::Left => 0,
            Command::Right => 1,
            Command::Straight => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapClass {
    Divider,
    Crossing,
    Boundary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub class: MapClass,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct VectorMap {
    pub polylines: Vec<Polyline>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTruth {
    pub agent_id: u64,
    pub class: AgentClass,
    pub pose: Pose2,
    pub speed: f64,
    pub length: f64,
    pub width: f64,
    pub behavior: Behavior,
    /// Signed path curvature for lane-following agents (1/m).
    #[serde(default)]
    pub curvature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoInit {
    pub pose: Pose2,
    pub speed: f64,
    pub route: Vec<(f64, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioTemplate {
    OpenLoopRandom,
    FrontalAdversary,
    SideAdversary,
    StationaryBlockage,
}

impl std::str::FromStr for ScenarioTemplate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "open_loop_random" => Ok(Self::OpenLoopRandom),
            "frontal_adversary" => Ok(Self::FrontalAdversary),
            "side_adversary" => Ok(Self::SideAdversary),
            "stationary_blockage" => Ok(Self::StationaryBlockage),
            other => Err(Error::Config(format!("unknown template: {other}"))),
        }
    }
}

/// A complete scripted world. Field names are part of the on-disk contract.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub template: ScenarioTemplate,
    pub frame_dt: f64,
    pub duration_s: f64,
    pub map: VectorMap,
    pub agents: Vec<AgentTruth>,
    pub ego: EgoInit,
    pub commands: Vec<Command>,
}

impl Scenario {
    pub fn frame_count(&self) -> usize {
        let n = self.duration_s / self.frame_dt;
        let rounded = n.round();
        assert!(
            (n - rounded).abs() < 1e-9,
            "duration must be an integer number of frames"
        );
        rounded as usize
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Scenario> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

// ---- generation ----

const LANE_WIDTH: f64 = 3.5;
const ROAD_LEN: f64 = 160.0;
const EGO_CRUISE_MIN: f64 = 5.0;
const EGO_CRUISE_MAX: f64 = 9.0;

/// Point and tangent heading of the constant-curvature reference line at
/// arc length `s`, offset `lateral` to the left. The line starts at the
/// origin heading +x.
fn road_frame(curvature: f64, s: f64, lateral: f64) -> (f64, f64, f64) {
    if curvature.abs() < 1e-9 {
        (s, lateral, 0.0)
    } else {
        let th = s * curvature;
        let base_x = th.sin() / curvature;
        let base_y = (1.0 - th.cos()) / curvature;
        // left normal of heading th is (-sin th, cos th)
        (base_x - lateral * th.sin(), base_y + lateral * th.cos(), th)
    }
}

fn road_polyline(curvature: f64, lateral: f64, class: MapClass, n: usize) -> Polyline {
    let pts = (0..n)
        .map(|i| {
            let s = ROAD_LEN * i as f64 / (n - 1) as f64 - 20.0;
            let (x, y, _) = road_frame(curvature, s, lateral);
            (x, y)
        })
        .collect();
    Polyline { class, points: pts }
}

/// Deterministic scenario generation from (seed, template).
pub fn generate_scenario(seed: u64, template: ScenarioTemplate) -> Scenario {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ template_salt(template));
    let frame_dt = crate::config::FRAME_DT;
    let duration_s = 10.0;
    let frames = (duration_s / frame_dt) as usize;

    let curvature = match template {
        ScenarioTemplate::OpenLoopRandom => {
            // bias toward straight, sometimes gentle turns
            let c: f64 = rng.gen_range(-0.012..0.012);
            if c.abs() < 0.004 {
                0.0
            } else {
                c
            }
        }
        _ => 0.0,
    };
    let command = if curvature > 0.004 {
        Command::Left
    } else if curvature < -0.004 {
        Command::Right
    } else {
        Command::Straight
    };

    // Map: two boundaries, one divider, one crossing ahead.
    let mut map = VectorMap::default();
    map.polylines.push(road_polyline(curvature, 2.0 * LANE_WIDTH, MapClass::Boundary, 16));
    map.polylines.push(road_polyline(curvature, -2.0 * LANE_WIDTH, MapClass::Boundary, 16));
    map.polylines.push(road_polyline(curvature, 0.0, MapClass::Divider, 16));
    {
        let s_cross = rng.gen_range(40.0..70.0);
        let (x0, y0, th) = road_frame(curvature, s_cross, -2.0 * LANE_WIDTH);
        let (x1, y1, _) = road_frame(curvature, s_cross, 2.0 * LANE_WIDTH);
        let _ = th;
        map.polylines.push(Polyline {
            class: MapClass::Crossing,
            points: vec![(x0, y0), (x1, y1)],
        });
    }

    // Ego drives the right lane (lateral -LANE_WIDTH/2).
    let ego_lat = -LANE_WIDTH / 2.0;
    let (ex, ey, eth) = road_frame(curvature, 0.0, ego_lat);
    let ego_speed = rng.gen_range(EGO_CRUISE_MIN..EGO_CRUISE_MAX);
    let route: Vec<(f64, f64)> = (0..64)
        .map(|i| {
            let s = i as f64 * 2.5;
            let (x, y, _) = road_frame(curvature, s, ego_lat);
            (x, y)
        })
        .collect();
    let ego = EgoInit {
        pose: Pose2::new(ex, ey, eth),
        speed: ego_speed,
        route,
    };

    let mut agents = Vec::new();
    let mut next_id = 0u64;
    match template {
        ScenarioTemplate::OpenLoopRandom => {
            let n_agents = rng.gen_range(2..=6usize);
            for _ in 0..n_agents {
                let is_ped = rng.gen_bool(0.25);
                if is_ped {
                    let s = rng.gen_range(20.0..90.0);
                    let lat = rng.gen_range(-9.0..9.0);
                    let (x, y, th) = road_frame(curvature, s, lat);
                    agents.push(AgentTruth {
                        agent_id: next_id,
                        class: AgentClass::Pedestrian,
                        pose: Pose2::new(x, y, th + rng.gen_range(-2.0..2.0)),
                        speed: rng.gen_range(0.0..1.5),
                        length: 0.6,
                        width: 0.6,
                        behavior: Behavior::ConstantVelocity,
                        curvature: 0.0,
                    });
                } else {
                    // car in one of the two lanes
                    let lane = if rng.gen_bool(0.6) { ego_lat } else { LANE_WIDTH / 2.0 };
                    let same_dir = lane < 0.0;
                    let s = rng.gen_range(15.0..80.0);
                    let (x, y, th) = road_frame(curvature, s, lane);
                    let yaw = if same_dir { th } else { normalize_angle(th + std::f64::consts::PI) };
                    agents.push(AgentTruth {
                        agent_id: next_id,
                        class: AgentClass::Car,
                        pose: Pose2::new(x, y, yaw),
                        speed: rng.gen_range(2.0..8.0),
                        length: rng.gen_range(4.0..5.0),
                        width: rng.gen_range(1.7..2.0),
                        behavior: Behavior::LaneFollow,
                        curvature: if same_dir { curvature } else { -curvature },
                    });
                }
                next_id += 1;
            }
        }
        ScenarioTemplate::FrontalAdversary => {
            let s = rng.gen_range(45.0..70.0);
            let (x, y, th) = road_frame(curvature, s, ego_lat);
            let yaw = normalize_angle(th + std::f64::consts::PI + rng.gen_range(-0.2..0.2));
            agents.push(AgentTruth {
                agent_id: next_id,
                class: AgentClass::Car,
                pose: Pose2::new(x, y, yaw),
                speed: rng.gen_range(4.0..8.0),
                length: 4.5,
                width: 1.8,
                behavior: Behavior::ScriptedAdversary,
                curvature: 0.0,
            });
        }
        ScenarioTemplate::SideAdversary => {
            let s_hit = rng.gen_range(30.0..50.0);
            let (hx, hy, _) = road_frame(curvature, s_hit, ego_lat);
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let start = (hx, hy + side * 20.0);
            let speed = rng.gen_range(3.0..6.0);
            let yaw = (hy - start.1).atan2(hx - start.0);
            agents.push(AgentTruth {
                agent_id: next_id,
                class: AgentClass::Car,
                pose: Pose2::new(start.0, start.1, yaw),
                speed,
                length: 4.5,
                width: 1.8,
                behavior: Behavior::ScriptedAdversary,
                curvature: 0.0,
            });
        }
        ScenarioTemplate::StationaryBlockage => {
            let s = rng.gen_range(25.0..45.0);
            let (x, y, th) = road_frame(curvature, s, ego_lat);
            agents.push(AgentTruth {
                agent_id: next_id,
                class: AgentClass::Car,
                pose: Pose2::new(x, y, th),
                speed: 0.0,
                length: 4.5,
                width: 1.8,
                behavior: Behavior::ConstantVelocity,
                curvature: 0.0,
            });
        }
    }

    Scenario {
        seed,
        template,
        frame_dt,
        duration_s,
        map,
        agents,
        ego: ego.clone(),
        commands: vec![command; frames],
    }
}

fn template_salt(t: ScenarioTemplate) -> u64 {
    match t {
        ScenarioTemplate::OpenLoopRandom => 0x6f70656e,
        ScenarioTemplate::FrontalAdversary => 0x66726f6e,
        ScenarioTemplate::SideAdversary => 0x73696465,
        ScenarioTemplate::StationaryBlockage => 0x626c6f63,
    }
}

// ---- simulation ----

#[derive(Clone, Debug)]
pub struct AgentState {
    pub truth: AgentTruth,
    pub pose: Pose2,
    pub speed: f64,
}

#[derive(Clone, Debug)]
pub struct WorldState {
    pub scenario: Scenario,
    pub agents: Vec<AgentState>,
    pub ego_pose: Pose2,
    pub ego_speed: f64,
    pub time: f64,
    /// Arc-length progress of the scripted ego along its route.
    pub ego_progress: f64,
    /// When false the ego is driven externally (closed loop) and
    /// `step_world` only advances the agents.
    pub ego_scripted: bool,
}

impl WorldState {
    pub fn from_scenario(s: &Scenario) -> Self {
        Self {
            agents: s
                .agents
                .iter()
                .map(|a| AgentState {
                    truth: a.clone(),
                    pose: a.pose,
                    speed: a.speed,
                })
                .collect(),
            ego_pose: s.ego.pose,
            ego_speed: s.ego.speed,
            ego_progress: 0.0,
            time: 0.0,
            ego_scripted: true,
            scenario: s.clone(),
        }
    }
}

fn step_agent(a: &mut AgentState, dt: f64) {
    match a.truth.behavior {
        Behavior::ConstantVelocity | Behavior::ScriptedAdversary => {
            let (s, c) = a.pose.yaw.sin_cos();
            a.pose = Pose2::new(a.pose.x + c * a.speed * dt, a.pose.y + s * a.speed * dt, a.pose.yaw);
        }
        Behavior::LaneFollow => {
            // unicycle with constant curvature
            let k = a.truth.curvature;
            if k.abs() < 1e-9 {
                let (s, c) = a.pose.yaw.sin_cos();
                a.pose = Pose2::new(a.pose.x + c * a.speed * dt, a.pose.y + s * a.speed * dt, a.pose.yaw);
            } else {
                let dth = a.speed * dt * k;
                let (s0, c0) = a.pose.yaw.sin_cos();
                let r = 1.0 / k;
                // exact arc integration
                let dx = r * ((a.pose.yaw + dth).sin() - s0);
                let dy = -r * ((a.pose.yaw + dth).cos() - c0);
                a.pose = Pose2::new(a.pose.x + dx, a.pose.y + dy, a.pose.yaw + dth);
            }
        }
    }
}

/// Position along a polyline route at arc length `s` (clamped at the ends),
/// with tangent heading.
pub fn route_point(route: &[(f64, f64)], s: f64) -> (f64, f64, f64) {
    assert!(route.len() >= 2);
    let mut remaining = s.max(0.0);
    for w in route.windows(2) {
        let (ax, ay) = w[0];
        let (bx, by) = w[1];
        let seg = ((bx - ax).powi(2) + (by - ay).powi(2)).sqrt();
        if remaining <= seg {
            let t = if seg > 0.0 { (remaining / seg).min(1.0) } else { 0.0 };
            let heading = (by - ay).atan2(bx - ax);
            return (ax + t * (bx - ax), ay + t * (by - ay), heading);
        }
        remaining -= seg;
    }
    let n = route.len();
    let (ax, ay) = route[n - 2];
    let (bx, by) = route[n - 1];
    (bx, by, (by - ay).atan2(bx - ax))
}

/// Ego car-following rule: track the cruise speed unless an agent sits
/// ahead on the route, in which case keep a time-headway gap.
fn ego_target_speed(state: &WorldState, cruise: f64) -> f64 {
    const HEADWAY_S: f64 = 1.2;
    const STANDOFF_M: f64 = 6.0;
    let mut min_gap = f64::INFINITY;
    let (es, ec) = state.ego_pose.yaw.sin_cos();
    for a in &state.agents {
        let dx = a.pose.x - state.ego_pose.x;
        let dy = a.pose.y - state.ego_pose.y;
        let ahead = dx * ec + dy * es;
        let lateral = -dx * es + dy * ec;
        if ahead > 0.0 && ahead < 60.0 && lateral.abs() < 2.0 {
            min_gap = min_gap.min(ahead);
        }
    }
    if !min_gap.is_finite() {
        return cruise;
    }
    ((min_gap - STANDOFF_M) / HEADWAY_S).clamp(0.0, cruise)
}

/// Advance every agent (and the scripted ego) by `dt`. Errors on dt <= 0.
pub fn step_world(state: &WorldState, dt: f64) -> Result<WorldState> {
    if dt <= 0.0 {
        return Err(Error::Config(format!("step_world: dt must be > 0, got {dt}")));
    }
    let mut next = state.clone();
    for a in &mut next.agents {
        step_agent(a, dt);
    }
    if next.ego_scripted {
        const EGO_ACCEL: f64 = 3.0;
        let cruise = state.scenario.ego.speed;
        let target = ego_target_speed(state, cruise);
        let dv = (target - next.ego_speed).clamp(-EGO_ACCEL * dt, EGO_ACCEL * dt);
        next.ego_speed = (next.ego_speed + dv).max(0.0);
        next.ego_progress += next.ego_speed * dt;
        let (x, y, yaw) = route_point(&state.scenario.ego.route, next.ego_progress);
        next.ego_pose = Pose2::new(x, y, yaw);
    }
    next.time += dt;
    Ok(next)
}

// ---- observation ----

#[derive(Clone, Debug)]
pub struct AgentObservation {
    pub agent_id: u64,
    pub class: AgentClass,
    /// Noisy box in the ego frame at the observation timestamp.
    pub box11: AnchorBox11,
}

#[derive(Clone, Debug)]
pub struct ObservationFrame {
    pub frame_index: usize,
    pub timestamp: f64,
    pub ego_pose: Pose2,
    pub ego_speed: f64,
    pub command: Command,
    pub agent_obs: Vec<AgentObservation>,
    /// Noisy map polylines in the ego frame, resampled to fixed length.
    pub map_obs: Vec<Polyline>,
    /// Per observed agent: future ego-frame positions and validity.
    pub gt_futures: Vec<(Array2<f64>, Vec<bool>)>,
    pub gt_ego_future: (Array2<f64>, Vec<bool>),
}

pub fn resample_polyline(points: &[(f64, f64)], n: usize) -> Vec<(f64, f64)> {
    assert!(points.len() >= 2 && n >= 2);
    let mut cum = vec![0.0];
    for w in points.windows(2) {
        let d = ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt();
        cum.push(cum.last().unwrap() + d);
    }
    let total = *cum.last().unwrap();
    (0..n)
        .map(|i| {
            let target = total * i as f64 / (n - 1) as f64;
            let j = cum.partition_point(|&c| c < target).clamp(1, points.len() - 1);
            let seg = cum[j] - cum[j - 1];
            let t = if seg > 0.0 { (target - cum[j - 1]) / seg } else { 0.0 };
            (
                points[j - 1].0 + t * (points[j].0 - points[j - 1].0),
                points[j - 1].1 + t * (points[j].1 - points[j - 1].1),
            )
        })
        .collect()
}

/// Emit a noisy observation of the world, with ground-truth futures obtained
/// by re-simulating the scenario forward.
pub fn observe(
    state: &WorldState,
    noise: &NoiseConfig,
    rng_seed: u64,
    t_mot: usize,
    t_plan: usize,
    map_points: usize,
) -> ObservationFrame {
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    let gauss = Normal::new(0.0, 1.0).unwrap();
    let ego = state.ego_pose;
    let frame_dt = state.scenario.frame_dt;
    let frame_index = (state.time / frame_dt).round() as usize;
    let frames_total = state.scenario.frame_count();

    // Forward re-simulation for ground-truth futures.
    let horizon = t_mot.max(t_plan);
    let mut future_states = Vec::with_capacity(horizon);
    let mut cursor = state.clone();
    for _ in 0..horizon {
        cursor = step_world(&cursor, frame_dt).expect("positive dt");
        future_states.push(cursor.clone());
    }

    let mut agent_obs = Vec::new();
    let mut gt_futures = Vec::new();
    for (ai, a) in state.agents.iter().enumerate() {
        let local = ego.inverse_transform_point((a.pose.x, a.pose.y));
        // draw all noise up-front so dropout does not shift the stream
        let nx = gauss.sample(&mut rng);
        let ny = gauss.sample(&mut rng);
        let nvx = gauss.sample(&mut rng);
        let nvy = gauss.sample(&mut rng);
        let nyaw = gauss.sample(&mut rng);
        let drop_draw: f64 = rng.gen();
        if local.0.hypot(local.1) > 80.0 {
            continue;
        }
        if drop_draw < noise.dropout_prob {
            continue;
        }
        let pos_std = match a.truth.class {
            AgentClass::Car => noise.pos_std_car,
            AgentClass::Pedestrian => noise.pos_std_pedestrian,
        };
        let rel_yaw = normalize_angle(a.pose.yaw - ego.yaw + nyaw * noise.yaw_std);
        let (vy_w, vx_w) = (a.pose.yaw.sin() * a.speed, a.pose.yaw.cos() * a.speed);
        let (es, ec) = ego.yaw.sin_cos();
        let vx_e = vx_w * ec + vy_w * es + nvx * noise.vel_std;
        let vy_e = -vx_w * es + vy_w * ec + nvy * noise.vel_std;
        let box11 = AnchorBox11 {
            x: local.0 + nx * pos_std,
            y: local.1 + ny * pos_std,
            z: 0.0,
            ln_w: a.truth.width.ln(),
            ln_h: (1.6f64).ln(),
            ln_l: a.truth.length.ln(),
            sin_yaw: rel_yaw.sin(),
            cos_yaw: rel_yaw.cos(),
            vx: vx_e,
            vy: vy_e,
            vz: 0.0,
        }
        .normalized_heading();
        agent_obs.push(AgentObservation {
            agent_id: a.truth.agent_id,
            class: a.truth.class,
            box11,
        });
        let mut traj = Array2::zeros((t_mot, 2));
        let mut mask = vec![false; t_mot];
        for s in 0..t_mot {
            let valid = frame_index + s + 1 <= frames_total;
            mask[s] = valid;
            let fp = future_states[s].agents[ai].pose;
            let lp = ego.inverse_transform_point((fp.x, fp.y));
            traj[(s, 0)] = lp.0;
            traj[(s, 1)] = lp.1;
        }
        gt_futures.push((traj, mask));
    }

    let mut ego_traj = Array2::zeros((t_plan, 2));
    let mut ego_mask = vec![false; t_plan];
    for s in 0..t_plan {
        ego_mask[s] = frame_index + s + 1 <= frames_total;
        let fp = future_states[s].ego_pose;
        let lp = ego.inverse_transform_point((fp.x, fp.y));
        ego_traj[(s, 0)] = lp.0;
        ego_traj[(s, 1)] = lp.1;
    }

    let mut map_obs = Vec::new();
    for pl in &state.scenario.map.polylines {
        let pts = resample_polyline(&pl.points, map_points);
        let noisy: Vec<(f64, f64)> = pts
            .iter()
            .map(|&(x, y)| {
                let local = ego.inverse_transform_point((x, y));
                (
                    local.0 + gauss.sample(&mut rng) * noise.map_std,
                    local.1 + gauss.sample(&mut rng) * noise.map_std,
                )
            })
            .collect();
        map_obs.push(Polyline {
            class: pl.class,
            points: noisy,
        });
    }

    let command = state
        .scenario
        .commands
        .get(frame_index.min(state.scenario.commands.len().saturating_sub(1)))
        .copied()
        .unwrap_or(Command::Straight);

    ObservationFrame {
        frame_index,
        timestamp: state.time,
        ego_pose: ego,
        ego_speed: state.ego_speed,
        command,
        agent_obs,
        map_obs,
        gt_futures,
        gt_ego_future: (ego_traj, ego_mask),
    }
}
