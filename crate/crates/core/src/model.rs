//! Full model wiring: one forward pass per frame, threading the historical
//! query memory through detection, motion prediction, and planning, plus
//! the planning policies used by the closed-loop harness.
//!
//! Cached queries feed back as constants: gradients never flow into the
//! memory bank, matching streaming-video training.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::path::Path;

use crate::config::RunConfig;
use crate::container;
use crate::error::{Error, Result};
use crate::memory::{compensate_geometry, slice_m2d, slice_m2m, slice_p2p, FrameCache, MemoryQueue};
use crate::nn::{ParamStore, Session};
use crate::perception::{
    assign_track_ids, detection_decoder, encode_observations, map_head, mot2det_fuse,
    MapQuerySet, ObjectQuerySet, TrackTable,
};
use crate::planner::{
    decode_motion, decode_plan, history_enhanced_motion, history_enhanced_plan,
    init_motion_queries, init_plan_queries, interact_obj_map, mot2plan_interact,
    select_by_command, select_with_score, DecodedTrajectories, MotionQuerySet, PlanQuerySet,
};
use crate::scene::ObservationFrame;

pub const TRACK_SCORE_THRESHOLD: f64 = 0.4;

pub struct BridgeModel {
    pub store: ParamStore,
    pub cfg: RunConfig,
}

/// Everything one frame produces: tape variables for the losses, the
/// detached cache entry for the memory bank, and the updated track table.
pub struct FrameOutput {
    pub objset: ObjectQuerySet,
    pub maps: MapQuerySet,
    pub motion: MotionQuerySet,
    pub motion_dec: DecodedTrajectories,
    pub plan: PlanQuerySet,
    pub plan_dec: DecodedTrajectories,
    pub cache: FrameCache,
    pub tracks: TrackTable,
}

impl BridgeModel {
    pub fn new(cfg: RunConfig) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.model_seed);
        crate::perception::register_params(&mut store, &cfg.dims, &mut rng);
        crate::planner::register_params(&mut store, &cfg.dims, &mut rng);
        BridgeModel { store, cfg }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let tensors = self
            .store
            .iter()
            .map(|(n, v)| (n.to_string(), v.clone()))
            .collect();
        container::save(path, &self.cfg, &tensors)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let ckpt = container::load(path)?;
        let mut model = BridgeModel::new(ckpt.config.clone());
        for (name, value) in &ckpt.tensors {
            if !model.store.contains(name) {
                return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
            }
            if model.store.get(name).shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?} does not match model {:?}",
                    value.shape(),
                    model.store.get(name).shape()
                )));
            }
            model.store.get_mut(name).assign(value);
        }
        // every model parameter must be present
        let missing: Vec<&str> = model
            .store
            .iter()
            .map(|(n, _)| n)
            .filter(|n| !ckpt.tensors.contains_key(*n))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint is missing {} tensors (first: {})",
                missing.len(),
                missing[0]
            )));
        }
        Ok(model)
    }

    /// One frame of the streaming forward pass. `queue` is read-only here;
    /// the caller decides when to push the returned cache entry.
    pub fn forward_frame(
        &self,
        sess: &mut Session,
        frame: &ObservationFrame,
        queue: &MemoryQueue,
        prev_tracks: Option<&TrackTable>,
        next_id: &mut i64,
    ) -> Result<FrameOutput> {
        let dims = &self.cfg.dims;
        let flags = &self.cfg.ablation;
        let pose = frame.ego_pose;

        // perception
        let (objset, feats) = encode_observations(sess, frame, dims);
        let mut objset = detection_decoder(sess, objset, &feats, dims.decoder_layers);
        if flags.mot2det {
            let m2d = slice_m2d(queue, frame.frame_index, &objset.obs_ids, dims.channels, pose);
            let m2d = compensate_geometry(&m2d, &m2d.source_poses.clone(), pose)?;
            objset = mot2det_fuse(sess, objset, &m2d)?;
        }
        let det_scores: Vec<f64> = sess
            .g
            .value2(objset.scores)
            .column(0)
            .iter()
            .copied()
            .collect();
        assign_track_ids(&mut objset, prev_tracks, &det_scores, TRACK_SCORE_THRESHOLD, next_id);
        let tracks = TrackTable::from_objset(&objset);
        let maps = map_head(sess, frame, dims);

        // motion prediction
        let objset = interact_obj_map(sess, objset, &maps);
        let mut motion = init_motion_queries(sess, &objset, dims);
        if flags.his_mot || flags.step_self_attn || flags.mode_self_attn {
            let m2m = slice_m2m(
                queue,
                frame.frame_index,
                &objset.obs_ids,
                dims.m_mot,
                dims.t_m2m,
                dims.t_mot,
                dims.channels,
                pose,
            )?;
            let m2m = compensate_geometry(&m2m, &m2m.source_poses.clone(), pose)?;
            motion = history_enhanced_motion(sess, motion, &m2m, flags)?;
        }
        let motion_dec = decode_motion(sess, &motion);
        let motion_probs = sess.g.value2(motion_dec.probs);

        // planning
        let mut plan = init_plan_queries(sess, &maps, dims);
        if flags.his_plan || flags.step_self_attn || flags.mode_self_attn {
            let p2p = slice_p2p(
                queue,
                frame.frame_index,
                dims.m_plan,
                dims.t_p2p,
                dims.t_plan,
                dims.channels,
                pose,
            )?;
            let p2p = compensate_geometry(&p2p, &p2p.source_poses.clone(), pose)?;
            plan = history_enhanced_plan(sess, plan, &p2p, flags)?;
        }
        if flags.mot2plan && !objset.is_empty() {
            let (selected, _) = select_with_score(sess, &motion, &motion_probs, dims.t_plan);
            plan = mot2plan_interact(sess, plan, selected, objset.len());
        }
        let plan_dec = decode_plan(sess, &plan);

        let cache = build_cache(sess, frame, &objset, &motion, &motion_dec, &plan, &plan_dec)?;
        Ok(FrameOutput {
            objset,
            maps,
            motion,
            motion_dec,
            plan,
            plan_dec,
            cache,
            tracks,
        })
    }
}

/// Detach the frame's queries and decoded trajectories into a cache entry.
fn build_cache(
    sess: &Session,
    frame: &ObservationFrame,
    objset: &ObjectQuerySet,
    motion: &MotionQuerySet,
    motion_dec: &DecodedTrajectories,
    plan: &PlanQuerySet,
    plan_dec: &DecodedTrajectories,
) -> Result<FrameCache> {
    let (n, m, t) = (motion.n_a, motion.m_mot, motion.t_mot);
    let c = sess.g.value2(plan.queries).ncols();
    let mq = sess.g.value2(motion.queries);
    let mut motion_queries = ArrayD::zeros(IxDyn(&[n, m, t, c]));
    let mtr = sess.g.value2(motion_dec.trajs);
    let mut motion_trajs = ArrayD::zeros(IxDyn(&[n, m, t, 2]));
    for a in 0..n {
        for mo in 0..m {
            for s in 0..t {
                let row = (a * m + mo) * t + s;
                for ch in 0..c {
                    motion_queries[IxDyn(&[a, mo, s, ch])] = mq[(row, ch)];
                }
                motion_trajs[IxDyn(&[a, mo, s, 0])] = mtr[(row, 0)];
                motion_trajs[IxDyn(&[a, mo, s, 1])] = mtr[(row, 1)];
            }
        }
    }
    let probs = sess.g.value2(motion_dec.probs);
    let mut motion_scores = ArrayD::zeros(IxDyn(&[n, m]));
    for a in 0..n {
        for mo in 0..m {
            motion_scores[IxDyn(&[a, mo])] = probs[(a, mo)];
        }
    }
    let (mp, tp) = (plan.m_plan, plan.t_plan);
    let pq = sess.g.value2(plan.queries);
    let ptr = sess.g.value2(plan_dec.trajs);
    let pprob = sess.g.value2(plan_dec.probs);
    let mut plan_queries = ArrayD::zeros(IxDyn(&[mp, tp, c]));
    let mut plan_trajs = ArrayD::zeros(IxDyn(&[mp, tp, 2]));
    let mut plan_scores = ArrayD::zeros(IxDyn(&[mp]));
    for mo in 0..mp {
        plan_scores[IxDyn(&[mo])] = pprob[(0, mo)];
        for s in 0..tp {
            let row = mo * tp + s;
            for ch in 0..c {
                plan_queries[IxDyn(&[mo, s, ch])] = pq[(row, ch)];
            }
            plan_trajs[IxDyn(&[mo, s, 0])] = ptr[(row, 0)];
            plan_trajs[IxDyn(&[mo, s, 1])] = ptr[(row, 1)];
        }
    }
    let cache = FrameCache {
        frame_index: frame.frame_index,
        ego_pose: frame.ego_pose,
        agent_ids: objset.obs_ids.clone(),
        motion_queries,
        motion_trajs,
        motion_scores,
        plan_queries,
        plan_trajs,
        plan_scores,
    };
    cache.check()?;
    Ok(cache)
}

/// A planner queried once per frame by the closed-loop harness. Returns
/// future ego waypoints in the current ego frame, [T_plan, 2].
pub trait Policy {
    fn plan(&mut self, frame: &ObservationFrame) -> Result<Array2<f64>>;
    fn reset(&mut self);
    fn horizon(&self) -> usize;
}

/// Runs the model in streaming mode, carrying the query memory between
/// replans.
pub struct ModelPolicy<'m> {
    model: &'m BridgeModel,
    queue: MemoryQueue,
    tracks: Option<TrackTable>,
    next_id: i64,
}

impl<'m> ModelPolicy<'m> {
    pub fn new(model: &'m BridgeModel) -> Self {
        let queue = MemoryQueue::new(model.cfg.dims.k_history);
        ModelPolicy { model, queue, tracks: None, next_id: 0 }
    }
}

impl Policy for ModelPolicy<'_> {
    fn plan(&mut self, frame: &ObservationFrame) -> Result<Array2<f64>> {
        let mut sess = Session::new(&self.model.store);
        let out = self.model.forward_frame(
            &mut sess,
            frame,
            &self.queue,
            self.tracks.as_ref(),
            &mut self.next_id,
        )?;
        let trajs = sess.g.value2(out.plan_dec.trajs);
        let probs = sess.g.value2(out.plan_dec.probs);
        let (_, waypoints) = select_by_command(&out.plan, &trajs, &probs, frame.command)?;
        self.tracks = Some(out.tracks);
        self.queue.push(out.cache)?;
        Ok(waypoints)
    }

    fn reset(&mut self) {
        self.queue.clear();
        self.tracks = None;
        self.next_id = 0;
    }

    fn horizon(&self) -> usize {
        self.model.cfg.dims.t_plan
    }
}

/// Keeps the current speed along the current heading; the non-reactive
/// reference used by the closed-loop score.
pub struct ConstantSpeedPolicy {
    pub t_plan: usize,
    pub frame_dt: f64,
}

impl Policy for ConstantSpeedPolicy {
    fn plan(&mut self, frame: &ObservationFrame) -> Result<Array2<f64>> {
        let mut wp = Array2::zeros((self.t_plan, 2));
        for s in 0..self.t_plan {
            wp[(s, 0)] = frame.ego_speed * self.frame_dt * (s + 1) as f64;
        }
        Ok(wp)
    }

    fn reset(&mut self) {}

    fn horizon(&self) -> usize {
        self.t_plan
    }
}

/// Commands an immediate stop: all waypoints at the origin.
pub struct FullStopPolicy {
    pub t_plan: usize,
}

impl Policy for FullStopPolicy {
    fn plan(&mut self, _frame: &ObservationFrame) -> Result<Array2<f64>> {
        Ok(Array2::zeros((self.t_plan, 2)))
    }

    fn reset(&mut self) {}

    fn horizon(&self) -> usize {
        self.t_plan
    }
}
