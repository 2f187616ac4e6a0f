//! FIFO memory bank of historical motion/planning queries, time-step-aligned
//! slicing, and ego-motion compensation of cached geometry.
//!
//! Step indexing convention: step `s` (0-based) of a trajectory cached at
//! frame `f` carries absolute timestamp `(f + s + 1) * frame_dt`. The slice
//! for current frame `t` therefore takes step `k-1` of frame `t-k` to land
//! on time `t`, and steps `k..k+T-1` to land on times `t+1..t+T`.

use std::collections::VecDeque;

use ndarray::{ArrayD, IxDyn};

use crate::config::FRAME_DT;
use crate::error::{Error, Result};
use crate::geometry::Pose2;

/// One past frame's detached model outputs.
#[derive(Clone, Debug)]
pub struct FrameCache {
    pub frame_index: usize,
    pub ego_pose: Pose2,
    pub agent_ids: Vec<u64>,
    /// [N_a, M_mot, T_mot, C]
    pub motion_queries: ArrayD<f64>,
    /// [N_a, M_mot, T_mot, 2] ego-frame meters
    pub motion_trajs: ArrayD<f64>,
    /// [N_a, M_mot]
    pub motion_scores: ArrayD<f64>,
    /// [M_plan, T_plan, C]
    pub plan_queries: ArrayD<f64>,
    /// [M_plan, T_plan, 2]
    pub plan_trajs: ArrayD<f64>,
    /// [M_plan]
    pub plan_scores: ArrayD<f64>,
}

impl FrameCache {
    pub fn n_agents(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn check(&self) -> Result<()> {
        let n = self.agent_ids.len();
        if self.motion_queries.shape()[0] != n
            || self.motion_trajs.shape()[0] != n
            || self.motion_scores.shape()[0] != n
        {
            return Err(Error::Alignment(format!(
                "frame cache arrays disagree with agent_ids length {n}"
            )));
        }
        if self.motion_scores.iter().any(|x| !x.is_finite()) {
            return Err(Error::Alignment("non-finite motion scores".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MemoryQueue {
    capacity: usize,
    entries: VecDeque<FrameCache>,
}

impl MemoryQueue {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1);
        Self {
            capacity,
            entries: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Oldest-first view of the cached frames.
    pub fn entries(&self) -> impl Iterator<Item = &FrameCache> {
        self.entries.iter()
    }

    /// Cached frame at `lag` frames before `current` (lag >= 1).
    pub fn at_lag(&self, current_frame: usize, lag: usize) -> Option<&FrameCache> {
        let target = current_frame.checked_sub(lag)?;
        self.entries.iter().find(|f| f.frame_index == target)
    }

    /// Append a frame; drops the oldest entry beyond capacity. The frame
    /// index must be strictly greater than the newest cached one.
    pub fn push(&mut self, frame: FrameCache) -> Result<()> {
        frame.check()?;
        if let Some(newest) = self.entries.back() {
            if frame.frame_index <= newest.frame_index {
                return Err(Error::Sequencing(format!(
                    "push: frame_index {} not after newest {}",
                    frame.frame_index, newest.frame_index
                )));
            }
        }
        self.entries.push_back(frame);
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }
}

/// What a slice was taken for; fixes the expected array rank.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SliceKind {
    /// [N_a, K, C] — current-time motion queries for detection fusion.
    Mot2Det,
    /// [N_a, M_mot, K, T_m2m, C]
    Mot2Mot,
    /// [M_plan, K, T_p2p, C]
    Plan2Plan,
}

/// Time-aligned extraction from the queue. `mask` has one entry per
/// (leading axis, lag); `positions` carries the cached trajectory point for
/// every selected query; `timestamps` is indexed like `mask` extended by the
/// step axis where applicable.
#[derive(Clone, Debug)]
pub struct HistorySlice {
    pub kind: SliceKind,
    pub queries: ArrayD<f64>,
    pub positions: ArrayD<f64>,
    /// Validity per (agent-or-unit, lag).
    pub mask: ArrayD<bool>,
    /// Absolute seconds per selected step, aligned with `queries` minus the
    /// channel axis.
    pub timestamps: ArrayD<f64>,
    /// Lag (frames back) per slot on the K axis: 1..=K.
    pub lags: Vec<usize>,
    /// Ego pose of the source frame per lag slot (current pose where the
    /// slot is unfilled).
    pub source_poses: Vec<Pose2>,
}

impl HistorySlice {
    pub fn any_valid(&self) -> bool {
        self.mask.iter().any(|&b| b)
    }
}

/// Highest-score mode per agent, tie-break lowest index.
fn argmax_mode(scores: &ArrayD<f64>, agent: usize) -> usize {
    let m = scores.shape()[1];
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for j in 0..m {
        let v = scores[IxDyn(&[agent, j])];
        if v > best_v {
            best_v = v;
            best = j;
        }
    }
    best
}

/// Current-time slice for detection fusion: from frame `t-k`, the motion
/// query step whose timestamp equals `t * frame_dt`, best-scoring mode per
/// agent. Output `[N_a, K, C]`.
pub fn slice_m2d(
    queue: &MemoryQueue,
    current_frame: usize,
    current_agent_ids: &[u64],
    channels: usize,
    current_pose: Pose2,
) -> HistorySlice {
    let k_cap = queue.capacity();
    let n = current_agent_ids.len();
    let mut queries = ArrayD::zeros(IxDyn(&[n, k_cap, channels]));
    let mut positions = ArrayD::zeros(IxDyn(&[n, k_cap, 2]));
    let mut mask = ArrayD::from_elem(IxDyn(&[n, k_cap]), false);
    let mut timestamps = ArrayD::zeros(IxDyn(&[n, k_cap]));
    let mut lags = Vec::with_capacity(k_cap);
    let mut source_poses = Vec::with_capacity(k_cap);
    for slot in 0..k_cap {
        let lag = slot + 1;
        lags.push(lag);
        let Some(frame) = queue.at_lag(current_frame, lag) else {
            source_poses.push(current_pose);
            continue;
        };
        source_poses.push(frame.ego_pose);
        let step = lag - 1; // timestamp (t-k + step + 1) dt == t dt
        if step >= frame.motion_queries.shape()[2] {
            continue;
        }
        for (ai, id) in current_agent_ids.iter().enumerate() {
            let Some(src) = frame.agent_ids.iter().position(|x| x == id) else {
                continue;
            };
            let mode = argmax_mode(&frame.motion_scores, src);
            for c in 0..channels {
                queries[IxDyn(&[ai, slot, c])] =
                    frame.motion_queries[IxDyn(&[src, mode, step, c])];
            }
            positions[IxDyn(&[ai, slot, 0])] = frame.motion_trajs[IxDyn(&[src, mode, step, 0])];
            positions[IxDyn(&[ai, slot, 1])] = frame.motion_trajs[IxDyn(&[src, mode, step, 1])];
            mask[IxDyn(&[ai, slot])] = true;
            timestamps[IxDyn(&[ai, slot])] =
                (frame.frame_index + step + 1) as f64 * FRAME_DT;
        }
    }
    HistorySlice {
        kind: SliceKind::Mot2Det,
        queries,
        positions,
        mask,
        timestamps,
        lags,
        source_poses,
    }
}

/// Future-aligned slice for motion prediction: from frame `t-k`, steps
/// `k..k+T_m2m-1` (0-based), which land on current future times
/// `t+1..t+T_m2m`. Output `[N_a, M_mot, K, T_m2m, C]`, mode axis aligned by
/// index across frames.
pub fn slice_m2m(
    queue: &MemoryQueue,
    current_frame: usize,
    current_agent_ids: &[u64],
    m_mot: usize,
    t_m2m: usize,
    t_mot: usize,
    channels: usize,
    current_pose: Pose2,
) -> Result<HistorySlice> {
    if t_m2m + queue.capacity() > t_mot {
        return Err(Error::Config(format!(
            "slice_m2m: t_m2m {} exceeds t_mot {} - K {}",
            t_m2m,
            t_mot,
            queue.capacity()
        )));
    }
    let k_cap = queue.capacity();
    let n = current_agent_ids.len();
    let mut queries = ArrayD::zeros(IxDyn(&[n, m_mot, k_cap, t_m2m, channels]));
    let mut positions = ArrayD::zeros(IxDyn(&[n, m_mot, k_cap, t_m2m, 2]));
    let mut mask = ArrayD::from_elem(IxDyn(&[n, k_cap]), false);
    let mut timestamps = ArrayD::zeros(IxDyn(&[n, m_mot, k_cap, t_m2m]));
    let mut lags = Vec::with_capacity(k_cap);
    let mut source_poses = Vec::with_capacity(k_cap);
    for slot in 0..k_cap {
        let lag = slot + 1;
        lags.push(lag);
        let Some(frame) = queue.at_lag(current_frame, lag) else {
            source_poses.push(current_pose);
            continue;
        };
        source_poses.push(frame.ego_pose);
        for (ai, id) in current_agent_ids.iter().enumerate() {
            let Some(src) = frame.agent_ids.iter().position(|x| x == id) else {
                continue;
            };
            mask[IxDyn(&[ai, slot])] = true;
            for mode in 0..m_mot {
                for s in 0..t_m2m {
                    let step = lag + s; // lands on time t + s + 1
                    for c in 0..channels {
                        queries[IxDyn(&[ai, mode, slot, s, c])] =
                            frame.motion_queries[IxDyn(&[src, mode, step, c])];
                    }
                    positions[IxDyn(&[ai, mode, slot, s, 0])] =
                        frame.motion_trajs[IxDyn(&[src, mode, step, 0])];
                    positions[IxDyn(&[ai, mode, slot, s, 1])] =
                        frame.motion_trajs[IxDyn(&[src, mode, step, 1])];
                    timestamps[IxDyn(&[ai, mode, slot, s])] =
                        (frame.frame_index + step + 1) as f64 * FRAME_DT;
                }
            }
        }
    }
    Ok(HistorySlice {
        kind: SliceKind::Mot2Mot,
        queries,
        positions,
        mask,
        timestamps,
        lags,
        source_poses,
    })
}

/// Future-aligned slice of cached planning queries. Output
/// `[M_plan, K, T_p2p, C]`; validity is per lag.
pub fn slice_p2p(
    queue: &MemoryQueue,
    current_frame: usize,
    m_plan: usize,
    t_p2p: usize,
    t_plan: usize,
    channels: usize,
    current_pose: Pose2,
) -> Result<HistorySlice> {
    if t_p2p + queue.capacity() > t_plan {
        return Err(Error::Config(format!(
            "slice_p2p: t_p2p {} exceeds t_plan {} - K {}",
            t_p2p,
            t_plan,
            queue.capacity()
        )));
    }
    let k_cap = queue.capacity();
    let mut queries = ArrayD::zeros(IxDyn(&[m_plan, k_cap, t_p2p, channels]));
    let mut positions = ArrayD::zeros(IxDyn(&[m_plan, k_cap, t_p2p, 2]));
    let mut mask = ArrayD::from_elem(IxDyn(&[k_cap]), false);
    let mut timestamps = ArrayD::zeros(IxDyn(&[k_cap, t_p2p]));
    let mut lags = Vec::with_capacity(k_cap);
    let mut source_poses = Vec::with_capacity(k_cap);
    for slot in 0..k_cap {
        let lag = slot + 1;
        lags.push(lag);
        let Some(frame) = queue.at_lag(current_frame, lag) else {
            source_poses.push(current_pose);
            continue;
        };
        source_poses.push(frame.ego_pose);
        mask[IxDyn(&[slot])] = true;
        for mode in 0..m_plan {
            for s in 0..t_p2p {
                let step = lag + s;
                for c in 0..channels {
                    queries[IxDyn(&[mode, slot, s, c])] =
                        frame.plan_queries[IxDyn(&[mode, step, c])];
                }
                positions[IxDyn(&[mode, slot, s, 0])] = frame.plan_trajs[IxDyn(&[mode, step, 0])];
                positions[IxDyn(&[mode, slot, s, 1])] = frame.plan_trajs[IxDyn(&[mode, step, 1])];
                timestamps[IxDyn(&[slot, s])] = (frame.frame_index + step + 1) as f64 * FRAME_DT;
            }
        }
    }
    Ok(HistorySlice {
        kind: SliceKind::Plan2Plan,
        queries,
        positions,
        mask,
        timestamps,
        lags,
        source_poses,
    })
}

/// Re-express every cached position from its source ego frame in the
/// current ego frame. Shapes and masks are untouched.
pub fn compensate_geometry(
    slice: &HistorySlice,
    historical_poses: &[Pose2],
    current_pose: Pose2,
) -> Result<HistorySlice> {
    if historical_poses.len() != slice.lags.len() {
        return Err(Error::Alignment(format!(
            "compensate: {} poses for {} lags",
            historical_poses.len(),
            slice.lags.len()
        )));
    }
    let mut out = slice.clone();
    if slice.positions.is_empty() {
        return Ok(out);
    }
    let k_axis = match slice.kind {
        SliceKind::Mot2Det => 1,
        SliceKind::Mot2Mot => 2,
        SliceKind::Plan2Plan => 1,
    };
    let shape = slice.positions.shape().to_vec();
    let mut idx = vec![0usize; shape.len()];
    loop {
        let slot = idx[k_axis];
        let src = historical_poses[slot];
        let mut p_idx = idx.clone();
        p_idx[shape.len() - 1] = 0;
        let x = slice.positions[IxDyn(&p_idx)];
        p_idx[shape.len() - 1] = 1;
        let y = slice.positions[IxDyn(&p_idx)];
        let world = src.transform_point((x, y));
        let local = current_pose.inverse_transform_point(world);
        p_idx[shape.len() - 1] = 0;
        out.positions[IxDyn(&p_idx)] = local.0;
        p_idx[shape.len() - 1] = 1;
        out.positions[IxDyn(&p_idx)] = local.1;
        // advance the multi-index, skipping the last (xy) axis
        let mut done = true;
        for d in (0..shape.len() - 1).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                done = false;
                break;
            }
            idx[d] = 0;
        }
        if done {
            break;
        }
    }
    Ok(out)
}

/// Full compensation: rigid-motion the cached positions into the current
/// ego frame, then add a learned embedding of (position, lag, step offset)
/// to each query feature. The encoder returns a length-C additive vector.
pub fn compensate(
    slice: &HistorySlice,
    historical_poses: &[Pose2],
    current_pose: Pose2,
    encoder: &dyn Fn(f64, f64, usize, usize) -> Vec<f64>,
) -> Result<HistorySlice> {
    let mut out = compensate_geometry(slice, historical_poses, current_pose)?;
    if out.queries.is_empty() {
        return Ok(out);
    }
    let shape = out.queries.shape().to_vec();
    let channels = *shape.last().unwrap();
    let rank = shape.len();
    let k_axis = match slice.kind {
        SliceKind::Mot2Det => 1,
        SliceKind::Mot2Mot => 2,
        SliceKind::Plan2Plan => 1,
    };
    // step axis exists for the future-aligned kinds only
    let step_axis = match slice.kind {
        SliceKind::Mot2Det => None,
        SliceKind::Mot2Mot | SliceKind::Plan2Plan => Some(rank - 2),
    };
    let mut idx = vec![0usize; rank - 1];
    loop {
        let slot = idx[k_axis];
        let step = step_axis.map(|a| idx[a]).unwrap_or(0);
        let mut p_idx = idx.clone();
        p_idx.push(0);
        let x = out.positions[IxDyn(&p_idx)];
        *p_idx.last_mut().unwrap() = 1;
        let y = out.positions[IxDyn(&p_idx)];
        let add = encoder(x, y, out.lags[slot], step);
        debug_assert_eq!(add.len(), channels);
        let mut q_idx = idx.clone();
        q_idx.push(0);
        for (c, a) in add.iter().enumerate() {
            *q_idx.last_mut().unwrap() = c;
            out.queries[IxDyn(&q_idx)] += a;
        }
        let mut done = true;
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                done = false;
                break;
            }
            idx[d] = 0;
        }
        if done {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn dummy_frame(frame_index: usize, agent_ids: Vec<u64>, c: usize) -> FrameCache {
        let n = agent_ids.len();
        let (m, t_mot, m_plan, t_plan) = (2, 6, 3, 6);
        let mut motion_queries = ArrayD::zeros(IxDyn(&[n, m, t_mot, c]));
        let mut motion_trajs = ArrayD::zeros(IxDyn(&[n, m, t_mot, 2]));
        for a in 0..n {
            for mode in 0..m {
                for s in 0..t_mot {
                    for ch in 0..c {
                        motion_queries[IxDyn(&[a, mode, s, ch])] =
                            1000.0 * frame_index as f64 + 100.0 * a as f64 + 10.0 * s as f64 + ch as f64;
                    }
                    motion_trajs[IxDyn(&[a, mode, s, 0])] = frame_index as f64 + s as f64;
                    motion_trajs[IxDyn(&[a, mode, s, 1])] = a as f64;
                }
            }
        }
        let mut motion_scores = ArrayD::zeros(IxDyn(&[n, m]));
        for a in 0..n {
            motion_scores[IxDyn(&[a, 1])] = 0.5; // mode 1 is best
        }
        let mut plan_queries = ArrayD::zeros(IxDyn(&[m_plan, t_plan, c]));
        for mode in 0..m_plan {
            for s in 0..t_plan {
                for ch in 0..c {
                    plan_queries[IxDyn(&[mode, s, ch])] =
                        1000.0 * frame_index as f64 + 10.0 * s as f64 + ch as f64;
                }
            }
        }
        FrameCache {
            frame_index,
            ego_pose: Pose2::identity(),
            agent_ids,
            motion_queries,
            motion_trajs,
            motion_scores,
            plan_queries,
            plan_trajs: ArrayD::zeros(IxDyn(&[m_plan, t_plan, 2])),
            plan_scores: ArrayD::zeros(IxDyn(&[m_plan])),
        }
    }

    #[test]
    fn fifo_keeps_most_recent_k() {
        let mut q = MemoryQueue::new(3);
        for f in 1..=5 {
            q.push(dummy_frame(f, vec![0], 4)).unwrap();
        }
        let idx: Vec<usize> = q.entries().map(|f| f.frame_index).collect();
        assert_eq!(idx, vec![3, 4, 5]);
    }

    #[test]
    fn push_empty_then_one() {
        let mut q = MemoryQueue::new(3);
        assert!(q.is_empty());
        q.push(dummy_frame(0, vec![0], 4)).unwrap();
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn push_non_monotonic_rejected() {
        let mut q = MemoryQueue::new(3);
        q.push(dummy_frame(4, vec![0], 4)).unwrap();
        assert!(q.push(dummy_frame(4, vec![0], 4)).is_err());
        assert!(q.push(dummy_frame(3, vec![0], 4)).is_err());
    }

    #[test]
    fn m2d_empty_queue_all_invalid() {
        let q = MemoryQueue::new(3);
        let s = slice_m2d(&q, 10, &[0, 1], 4, Pose2::identity());
        assert!(!s.any_valid());
        assert!(s.queries.iter().all(|&x| x == 0.0));
        assert_eq!(s.queries.shape(), &[2, 3, 4]);
    }

    #[test]
    fn m2d_selects_current_time_step() {
        let mut q = MemoryQueue::new(3);
        for f in 7..=9 {
            q.push(dummy_frame(f, vec![0], 4)).unwrap();
        }
        let s = slice_m2d(&q, 10, &[0], 4, Pose2::identity());
        // (frame, 1-based step) pairs: (9,1),(8,2),(7,3)
        for slot in 0..3 {
            assert!(s.mask[IxDyn(&[0, slot])]);
            assert!((s.timestamps[IxDyn(&[0, slot])] - 10.0 * FRAME_DT).abs() < 1e-12);
        }
        // step index (lag-1), channel 0, agent 0: 1000*f + 10*s
        assert_eq!(s.queries[IxDyn(&[0, 0, 0])], 9000.0);
        assert_eq!(s.queries[IxDyn(&[0, 1, 0])], 8010.0);
        assert_eq!(s.queries[IxDyn(&[0, 2, 0])], 7020.0);
    }

    #[test]
    fn m2m_selects_future_aligned_steps() {
        let mut q = MemoryQueue::new(3);
        for f in 7..=9 {
            q.push(dummy_frame(f, vec![0], 4)).unwrap();
        }
        let s = slice_m2m(&q, 10, &[0], 2, 3, 6, 4, Pose2::identity()).unwrap();
        assert_eq!(s.queries.shape(), &[1, 2, 3, 3, 4]);
        // lag 2 (slot 1): steps 2..4 (0-based), timestamps (t+1..t+3) dt
        for st in 0..3 {
            let ts = s.timestamps[IxDyn(&[0, 0, 1, st])];
            assert!((ts - (11 + st) as f64 * FRAME_DT).abs() < 1e-12);
        }
        assert_eq!(s.queries[IxDyn(&[0, 0, 1, 0, 0])], 8020.0);
    }

    #[test]
    fn m2m_bound_violation_rejected() {
        let q = MemoryQueue::new(3);
        assert!(slice_m2m(&q, 5, &[0], 2, 4, 6, 4, Pose2::identity()).is_err());
    }

    #[test]
    fn m2m_unseen_agent_masked() {
        let mut q = MemoryQueue::new(3);
        q.push(dummy_frame(9, vec![7], 4)).unwrap();
        let s = slice_m2m(&q, 10, &[7, 8], 2, 3, 6, 4, Pose2::identity()).unwrap();
        assert!(s.mask[IxDyn(&[0, 0])]);
        assert!(!s.mask[IxDyn(&[1, 0])]);
    }

    #[test]
    fn p2p_cold_start_single_lag() {
        let mut q = MemoryQueue::new(3);
        q.push(dummy_frame(9, vec![0], 4)).unwrap();
        let s = slice_p2p(&q, 10, 3, 3, 6, 4, Pose2::identity()).unwrap();
        assert!(s.mask[IxDyn(&[0])]);
        assert!(!s.mask[IxDyn(&[1])]);
        assert!(!s.mask[IxDyn(&[2])]);
        // lag 1 selects 0-based steps 1..3
        assert_eq!(s.queries[IxDyn(&[0, 0, 0, 0])], 9010.0);
    }

    #[test]
    fn compensation_identity_without_ego_motion() {
        let mut q = MemoryQueue::new(2);
        q.push(dummy_frame(9, vec![0], 4)).unwrap();
        let s = slice_m2d(&q, 10, &[0], 4, Pose2::identity());
        let out =
            compensate_geometry(&s, &s.source_poses.clone(), Pose2::identity()).unwrap();
        assert_eq!(out.positions, s.positions);
    }

    #[test]
    fn compensation_translates_into_current_frame() {
        let mut q = MemoryQueue::new(1);
        let mut f = dummy_frame(9, vec![0], 4);
        f.motion_trajs.fill(0.0);
        f.motion_trajs[IxDyn(&[0, 1, 0, 0])] = 10.0; // best mode is 1
        f.ego_pose = Pose2::identity();
        q.push(f).unwrap();
        let s = slice_m2d(&q, 10, &[0], 4, Pose2::new(5.0, 0.0, 0.0));
        let out = compensate_geometry(&s, &s.source_poses.clone(), Pose2::new(5.0, 0.0, 0.0))
            .unwrap();
        assert!((out.positions[IxDyn(&[0, 0, 0])] - 5.0).abs() < 1e-12);
        assert!(out.positions[IxDyn(&[0, 0, 1])].abs() < 1e-12);
    }

    #[test]
    fn compensation_round_trip() {
        let mut q = MemoryQueue::new(2);
        let mut f = dummy_frame(9, vec![0], 4);
        f.ego_pose = Pose2::new(1.0, -2.0, 0.7);
        q.push(f).unwrap();
        let cur = Pose2::new(3.0, 4.0, -0.4);
        let s = slice_m2d(&q, 10, &[0], 4, cur);
        let fwd = compensate_geometry(&s, &s.source_poses.clone(), cur).unwrap();
        // invert: express back in the source frame
        let back = {
            let mut tmp = fwd.clone();
            tmp.source_poses = vec![cur; fwd.source_poses.len()];
            compensate_geometry(&tmp, &vec![cur; fwd.source_poses.len()], s.source_poses[0])
                .unwrap()
        };
        // only the filled slot (lag 1) round-trips; the empty slot holds
        // placeholder zeros tied to the current pose
        let n_agents = s.positions.shape()[0];
        for a in 0..n_agents {
            for c in 0..2 {
                let i = IxDyn(&[a, 0, c]);
                assert!((back.positions[&i] - s.positions[&i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn compensate_pose_count_mismatch_rejected() {
        let q = MemoryQueue::new(3);
        let s = slice_m2d(&q, 10, &[0], 4, Pose2::identity());
        assert!(compensate_geometry(&s, &[Pose2::identity()], Pose2::identity()).is_err());
    }

    #[test]
    fn compensate_adds_encoder_output_and_keeps_masks() {
        let mut q = MemoryQueue::new(2);
        q.push(dummy_frame(9, vec![0], 4)).unwrap();
        let s = slice_m2d(&q, 10, &[0], 4, Pose2::identity());
        let enc = |_x: f64, _y: f64, lag: usize, _step: usize| vec![lag as f64; 4];
        let out = compensate(&s, &s.source_poses.clone(), Pose2::identity(), &enc).unwrap();
        assert_eq!(out.mask, s.mask);
        assert_eq!(out.queries.shape(), s.queries.shape());
        assert_eq!(
            out.queries[IxDyn(&[0, 0, 0])],
            s.queries[IxDyn(&[0, 0, 0])] + 1.0
        );
        assert_eq!(
            out.queries[IxDyn(&[0, 1, 0])],
            s.queries[IxDyn(&[0, 1, 0])] + 2.0
        );
    }
}
