//! Multi-step motion and planning query heads: history-enhanced motion
//! prediction, history-enhanced planning, step-level Mot2Plan interaction,
//! trajectory/score decoding, and command-conditioned plan selection.
//!
//! Query sets are kept flattened on the tape: motion rows are ordered
//! ((agent * M + mode) * T + step, channel), plan rows (mode * T + step).

use ndarray::{Array2, IxDyn};
use rand_chacha::ChaCha12Rng;

use crate::autodiff::Var;
use crate::config::{AblationFlags, ModelDims};
use crate::error::{Error, Result};
use crate::memory::HistorySlice;
use crate::nn::{register_attn_block, ParamStore, Session};
use crate::perception::{MapQuerySet, ObjectQuerySet};
use crate::scene::Command;

pub struct MotionQuerySet {
    /// [N_a * M_mot * T_mot, C]
    pub queries: Var,
    pub n_a: usize,
    pub m_mot: usize,
    pub t_mot: usize,
}

impl MotionQuerySet {
    pub fn row(&self, agent: usize, mode: usize, step: usize) -> usize {
        (agent * self.m_mot + mode) * self.t_mot + step
    }
}

pub struct PlanQuerySet {
    /// [M_plan * T_plan, C]
    pub queries: Var,
    pub m_plan: usize,
    pub t_plan: usize,
    /// Command group per mode: 0 left, 1 right, 2 straight.
    pub command_group: Vec<usize>,
}

impl PlanQuerySet {
    pub fn row(&self, mode: usize, step: usize) -> usize {
        mode * self.t_plan + step
    }

    pub fn modes_for(&self, command: Command) -> Vec<usize> {
        let g = command.group_index();
        (0..self.m_plan)
            .filter(|&m| self.command_group[m] == g)
            .collect()
    }
}

pub fn register_params(store: &mut ParamStore, dims: &ModelDims, rng: &mut ChaCha12Rng) {
    let c = dims.channels;
    store.register_embedding("mot.mode_emb", dims.m_mot, c, rng);
    store.register_embedding("mot.step_emb", dims.t_mot, c, rng);
    register_attn_block(store, "obj_map.attn", c, rng);
    store.register_embedding("ego.query", 1, c, rng);
    register_attn_block(store, "ego_map.attn", c, rng);
    store.register_embedding("plan.mode_emb", dims.m_plan, c, rng);
    store.register_embedding("plan.step_emb", dims.t_plan, c, rng);
    register_attn_block(store, "m2m.attn", c, rng);
    store.register_linear("m2m.pos.fc1", 4, c, rng);
    store.register_linear("m2m.pos.fc2", c, c, rng);
    register_attn_block(store, "p2p.attn", c, rng);
    store.register_linear("p2p.pos.fc1", 4, c, rng);
    store.register_linear("p2p.pos.fc2", c, c, rng);
    register_attn_block(store, "mot.sla", c, rng);
    register_attn_block(store, "mot.mla", c, rng);
    register_attn_block(store, "plan.sla", c, rng);
    register_attn_block(store, "plan.mla", c, rng);
    register_attn_block(store, "m2p.attn", c, rng);
    store.register_linear("mot.head.offset", c, 2, rng);
    store.register_linear("mot.head.score", c, 1, rng);
    store.register_linear("plan.head.offset", c, 2, rng);
    store.register_linear("plan.head.score", c, 1, rng);
}

/// Object queries interact with map queries before motion prediction.
pub fn interact_obj_map(sess: &mut Session, objset: ObjectQuerySet, maps: &MapQuerySet) -> ObjectQuerySet {
    if objset.is_empty() || maps.n_map == 0 {
        return objset;
    }
    let mask = Array2::from_elem((objset.len(), maps.n_map), true);
    let q = sess.attn_block("obj_map.attn", objset.queries, maps.queries, &mask);
    ObjectQuerySet { queries: q, ..objset }
}

/// Broadcast each object query across modes and steps, plus learned mode
/// and step embeddings.
pub fn init_motion_queries(sess: &mut Session, objset: &ObjectQuerySet, dims: &ModelDims) -> MotionQuerySet {
    let (n, m, t) = (objset.len(), dims.m_mot, dims.t_mot);
    if n == 0 {
        let queries = sess.g.leaf2(Array2::zeros((0, dims.channels)));
        return MotionQuerySet { queries, n_a: 0, m_mot: m, t_mot: t };
    }
    let mut base_idx = Vec::with_capacity(n * m * t);
    let mut mode_idx = Vec::with_capacity(n * m * t);
    let mut step_idx = Vec::with_capacity(n * m * t);
    for a in 0..n {
        for mo in 0..m {
            for s in 0..t {
                base_idx.push(a);
                mode_idx.push(mo);
                step_idx.push(s);
            }
        }
    }
    let base = sess.g.select_rows(objset.queries, &base_idx);
    let me = sess.p("mot.mode_emb");
    let se = sess.p("mot.step_emb");
    let mrows = sess.g.select_rows(me, &mode_idx);
    let srows = sess.g.select_rows(se, &step_idx);
    let sum = sess.g.add(base, mrows);
    let queries = sess.g.add(sum, srows);
    MotionQuerySet { queries, n_a: n, m_mot: m, t_mot: t }
}

/// Planning queries from a learned ego query (which first attends to the
/// map), broadcast across plan modes and steps. Command groups are fixed:
/// consecutive blocks of M_plan/3 modes map to {left, right, straight}.
pub fn init_plan_queries(sess: &mut Session, maps: &MapQuerySet, dims: &ModelDims) -> PlanQuerySet {
    let (m, t) = (dims.m_plan, dims.t_plan);
    let mut ego = sess.p("ego.query");
    if maps.n_map > 0 {
        let mask = Array2::from_elem((1, maps.n_map), true);
        ego = sess.attn_block("ego_map.attn", ego, maps.queries, &mask);
    }
    let mut base_idx = Vec::with_capacity(m * t);
    let mut mode_idx = Vec::with_capacity(m * t);
    let mut step_idx = Vec::with_capacity(m * t);
    for mo in 0..m {
        for s in 0..t {
            base_idx.push(0);
            mode_idx.push(mo);
            step_idx.push(s);
        }
    }
    let base = sess.g.select_rows(ego, &base_idx);
    let me = sess.p("plan.mode_emb");
    let se = sess.p("plan.step_emb");
    let mrows = sess.g.select_rows(me, &mode_idx);
    let srows = sess.g.select_rows(se, &step_idx);
    let sum = sess.g.add(base, mrows);
    let queries = sess.g.add(sum, srows);
    let per_group = m / 3;
    let command_group = (0..m).map(|mo| mo / per_group).collect();
    PlanQuerySet { queries, m_plan: m, t_plan: t, command_group }
}

/// Shared machinery for the step-aligned history cross-attention stage:
/// the leading `t_fused` steps of the query set attend over the cached
/// queries that land on the same absolute future time, then the result is
/// scattered back among the untouched trailing steps.
#[allow(clippy::too_many_arguments)]
fn step_aligned_cross(
    sess: &mut Session,
    attn_prefix: &str,
    pos_prefix: &str,
    queries: Var,
    units: usize, // N_a * M_mot for motion, M_plan for planning
    t_total: usize,
    slice: &HistorySlice,
    unit_valid: &dyn Fn(usize, usize) -> bool, // (unit, lag slot) -> valid
) -> Var {
    if !slice.any_valid() {
        return queries;
    }
    let q_shape = slice.queries.shape().to_vec();
    let c = *q_shape.last().unwrap();
    let k = slice.lags.len();
    let t_fused = q_shape[q_shape.len() - 2];
    // flatten cached queries to [units * K * t_fused, C] ordered
    // (unit, lag, step)
    let mut flat = Array2::zeros((units * k * t_fused, c));
    let mut geo = Array2::zeros((units * k * t_fused, 4));
    for u in 0..units {
        for slot in 0..k {
            for s in 0..t_fused {
                let row = (u * k + slot) * t_fused + s;
                let src_idx: Vec<usize> = match slice.kind {
                    crate::memory::SliceKind::Mot2Mot => {
                        let m = q_shape[1];
                        vec![u / m, u % m, slot, s]
                    }
                    crate::memory::SliceKind::Plan2Plan => vec![u, slot, s],
                    crate::memory::SliceKind::Mot2Det => unreachable!(),
                };
                for ch in 0..c {
                    let mut qi = src_idx.clone();
                    qi.push(ch);
                    flat[(row, ch)] = slice.queries[IxDyn(&qi)];
                }
                let mut pi = src_idx.clone();
                pi.push(0);
                geo[(row, 0)] = slice.positions[IxDyn(&pi)];
                pi[src_idx.len()] = 1;
                geo[(row, 1)] = slice.positions[IxDyn(&pi)];
                geo[(row, 2)] = slice.lags[slot] as f64;
                geo[(row, 3)] = s as f64;
            }
        }
    }
    let cached = sess.g.leaf2(flat);
    let geo_leaf = sess.g.leaf2(geo);
    let pos = sess.mlp(pos_prefix, geo_leaf);
    let keys = sess.g.add(cached, pos);
    // gather the leading t_fused steps of every unit
    let mut fused_rows = Vec::with_capacity(units * t_fused);
    let mut rest_rows = Vec::new();
    for u in 0..units {
        for s in 0..t_total {
            let row = u * t_total + s;
            if s < t_fused {
                fused_rows.push(row);
            } else {
                rest_rows.push(row);
            }
        }
    }
    let sub = sess.g.select_rows(queries, &fused_rows);
    // mask: query (u, s) sees key (u, slot, s) iff the unit is valid at slot
    let mut mask = Array2::from_elem((units * t_fused, units * k * t_fused), false);
    for u in 0..units {
        for s in 0..t_fused {
            for slot in 0..k {
                if unit_valid(u, slot) {
                    mask[(u * t_fused + s, (u * k + slot) * t_fused + s)] = true;
                }
            }
        }
    }
    let updated = sess.attn_block(attn_prefix, sub, keys, &mask);
    if rest_rows.is_empty() {
        // all steps fused; restore original ordering (already unit-major)
        return updated;
    }
    let rest = sess.g.select_rows(queries, &rest_rows);
    let cat = sess.g.concat_rows(&[updated, rest]);
    // restore: fused rows come first in cat, rest rows after
    let mut perm = vec![0usize; units * t_total];
    for (pos_in_cat, &orig) in fused_rows.iter().chain(rest_rows.iter()).enumerate() {
        perm[orig] = pos_in_cat;
    }
    sess.g.select_rows(cat, &perm)
}

fn step_groups(units: usize, t: usize) -> Vec<Vec<usize>> {
    (0..units)
        .map(|u| (0..t).map(|s| u * t + s).collect())
        .collect()
}

fn mode_groups(n_a: usize, m: usize, t: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(n_a * t);
    for a in 0..n_a {
        for s in 0..t {
            out.push((0..m).map(|mo| (a * m + mo) * t + s).collect());
        }
    }
    out
}

/// History-enhanced motion prediction: step-aligned cross-attention to the
/// cached motion queries, then step-level and mode-level self-attention.
pub fn history_enhanced_motion(
    sess: &mut Session,
    mot: MotionQuerySet,
    m2m: &HistorySlice,
    flags: &AblationFlags,
) -> Result<MotionQuerySet> {
    if mot.n_a == 0 {
        return Ok(mot);
    }
    let shape = m2m.queries.shape();
    if shape[0] != mot.n_a || shape[1] != mot.m_mot {
        return Err(Error::Alignment(format!(
            "history_enhanced_motion: slice [{:?}] vs queries ({}, {})",
            shape, mot.n_a, mot.m_mot
        )));
    }
    let units = mot.n_a * mot.m_mot;
    let mut q = mot.queries;
    if flags.his_mot {
        let m = mot.m_mot;
        let mask = m2m.mask.clone();
        q = step_aligned_cross(
            sess,
            "m2m.attn",
            "m2m.pos",
            q,
            units,
            mot.t_mot,
            m2m,
            &move |u, slot| mask[IxDyn(&[u / m, slot])],
        );
    }
    if flags.step_self_attn {
        q = sess.grouped_self_attn("mot.sla", q, &step_groups(units, mot.t_mot));
    }
    if flags.mode_self_attn {
        q = sess.grouped_self_attn("mot.mla", q, &mode_groups(mot.n_a, mot.m_mot, mot.t_mot));
    }
    Ok(MotionQuerySet { queries: q, ..mot })
}

/// History-enhanced planning: same three-stage structure over the plan
/// query set.
pub fn history_enhanced_plan(
    sess: &mut Session,
    plan: PlanQuerySet,
    p2p: &HistorySlice,
    flags: &AblationFlags,
) -> Result<PlanQuerySet> {
    let shape = p2p.queries.shape();
    if shape[0] != plan.m_plan {
        return Err(Error::Alignment(format!(
            "history_enhanced_plan: slice has {} modes, plan has {}",
            shape[0], plan.m_plan
        )));
    }
    let mut q = plan.queries;
    if flags.his_plan {
        let mask = p2p.mask.clone();
        q = step_aligned_cross(
            sess,
            "p2p.attn",
            "p2p.pos",
            q,
            plan.m_plan,
            plan.t_plan,
            p2p,
            &move |_u, slot| mask[IxDyn(&[slot])],
        );
    }
    if flags.step_self_attn {
        q = sess.grouped_self_attn("plan.sla", q, &step_groups(plan.m_plan, plan.t_plan));
    }
    if flags.mode_self_attn {
        let groups: Vec<Vec<usize>> = (0..plan.t_plan)
            .map(|s| (0..plan.m_plan).map(|mo| mo * plan.t_plan + s).collect())
            .collect();
        q = sess.grouped_self_attn("plan.mla", q, &groups);
    }
    Ok(PlanQuerySet { queries: q, ..plan })
}

/// Per agent, pick the argmax-score mode (tie-break lowest index) and take
/// its first `t_plan` step queries: output [N_a * t_plan, C].
pub fn select_with_score(
    sess: &mut Session,
    mot: &MotionQuerySet,
    scores: &Array2<f64>,
    t_plan: usize,
) -> (Var, Vec<usize>) {
    assert!(t_plan <= mot.t_mot);
    assert_eq!(scores.dim(), (mot.n_a, mot.m_mot));
    let mut winners = Vec::with_capacity(mot.n_a);
    let mut rows = Vec::with_capacity(mot.n_a * t_plan);
    for a in 0..mot.n_a {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for m in 0..mot.m_mot {
            if scores[(a, m)] > best_v {
                best_v = scores[(a, m)];
                best = m;
            }
        }
        winners.push(best);
        for s in 0..t_plan {
            rows.push(mot.row(a, best, s));
        }
    }
    if mot.n_a == 0 {
        let c = sess.g.value2(mot.queries).ncols().max(1);
        return (sess.g.leaf2(Array2::zeros((0, c))), winners);
    }
    (sess.g.select_rows(mot.queries, &rows), winners)
}

/// Step-level Mot2Plan interaction: each plan query at step s cross-attends
/// over the selected agent queries at step s. Identity when no agents.
pub fn mot2plan_interact(
    sess: &mut Session,
    plan: PlanQuerySet,
    selected: Var,
    n_a: usize,
) -> PlanQuerySet {
    if n_a == 0 {
        return plan;
    }
    let t = plan.t_plan;
    let mut mask = Array2::from_elem((plan.m_plan * t, n_a * t), false);
    for mo in 0..plan.m_plan {
        for s in 0..t {
            for a in 0..n_a {
                mask[(mo * t + s, a * t + s)] = true;
            }
        }
    }
    let q = sess.attn_block("m2p.attn", plan.queries, selected, &mask);
    PlanQuerySet { queries: q, ..plan }
}

pub struct DecodedTrajectories {
    /// Cumulative-sum positions, [units * T, 2] on the tape.
    pub trajs: Var,
    /// Mode score logits: [N_a, M] (motion) or [1, M_plan] (plan).
    pub score_logits: Var,
    /// Softmax probabilities with the same shape as `score_logits`;
    /// for plans the softmax is within each command group.
    pub probs: Var,
}

/// Regress per-step 2D offsets and cumulative-sum them into ego-frame
/// positions; pool each mode's step queries for a score logit.
pub fn decode_motion(sess: &mut Session, mot: &MotionQuerySet) -> DecodedTrajectories {
    let t = mot.t_mot;
    let offsets = sess.linear("mot.head.offset", mot.queries);
    let trajs = sess.g.cumsum_rows_grouped(offsets, t);
    if mot.n_a == 0 {
        let score_logits = sess.g.leaf2(Array2::zeros((0, mot.m_mot)));
        let probs = sess.g.leaf2(Array2::zeros((0, mot.m_mot)));
        return DecodedTrajectories { trajs, score_logits, probs };
    }
    let pooled = sess.g.mean_rows_grouped(mot.queries, t); // [n*m, C]
    let logits_col = sess.linear("mot.head.score", pooled); // [n*m, 1]
    // [n*m, 1] -> [n, m]
    let mut per_agent = Vec::with_capacity(mot.n_a);
    for a in 0..mot.n_a {
        let rows: Vec<usize> = (0..mot.m_mot).map(|m| a * mot.m_mot + m).collect();
        let sub = sess.g.select_rows(logits_col, &rows); // [m, 1]
        per_agent.push(sess.g.transpose2(sub)); // [1, m]
    }
    let score_logits = sess.g.concat_rows(&per_agent); // [n, m]
    let probs = sess.g.softmax_rows(score_logits);
    DecodedTrajectories { trajs, score_logits, probs }
}

/// Plan decoding; scores are softmax-normalized within each command group.
pub fn decode_plan(sess: &mut Session, plan: &PlanQuerySet) -> DecodedTrajectories {
    let t = plan.t_plan;
    let offsets = sess.linear("plan.head.offset", plan.queries);
    let trajs = sess.g.cumsum_rows_grouped(offsets, t);
    let pooled = sess.g.mean_rows_grouped(plan.queries, t); // [M_plan, C]
    let logits_col = sess.linear("plan.head.score", pooled); // [M_plan, 1]
    let score_logits = sess.g.transpose2(logits_col); // [1, M_plan]
    // softmax per command group, stitched back into mode order
    let groups: Vec<Vec<usize>> = (0..3)
        .map(|g| {
            (0..plan.m_plan)
                .filter(|&m| plan.command_group[m] == g)
                .collect()
        })
        .collect();
    let mut probs_parts: Vec<Var> = Vec::new();
    let mut col_orders: Vec<usize> = Vec::new();
    for g in &groups {
        if g.is_empty() {
            continue;
        }
        let colsel = {
            let mut m = Array2::zeros((plan.m_plan, g.len()));
            for (j, &mode) in g.iter().enumerate() {
                m[(mode, j)] = 1.0;
            }
            sess.g.leaf2(m)
        };
        let sub = sess.g.matmul(score_logits, colsel); // [1, |g|]
        let sm = sess.g.softmax_rows(sub);
        probs_parts.push(sess.g.transpose2(sm)); // [|g|, 1]
        col_orders.extend_from_slice(g);
    }
    let stacked = sess.g.concat_rows(&probs_parts); // [M_plan, 1] in group order
    let mut inv = vec![0usize; plan.m_plan];
    for (pos, &mode) in col_orders.iter().enumerate() {
        inv[mode] = pos;
    }
    let ordered = sess.g.select_rows(stacked, &inv);
    let probs = sess.g.transpose2(ordered); // [1, M_plan]
    DecodedTrajectories { trajs, score_logits, probs }
}

/// Final command-conditioned selection: argmax-probability mode within the
/// command's group, tie-break lowest index. Returns [T_plan, 2].
pub fn select_by_command(
    plan: &PlanQuerySet,
    trajs: &Array2<f64>,
    probs: &Array2<f64>,
    command: Command,
) -> Result<(usize, Array2<f64>)> {
    let modes = plan.modes_for(command);
    if modes.is_empty() {
        return Err(Error::Config(format!(
            "no plan modes for command {command:?}"
        )));
    }
    let mut best = modes[0];
    let mut best_v = f64::NEG_INFINITY;
    for &m in &modes {
        let v = probs[(0, m)];
        if v > best_v {
            best_v = v;
            best = m;
        }
    }
    let t = plan.t_plan;
    let mut out = Array2::zeros((t, 2));
    for s in 0..t {
        out[(s, 0)] = trajs[(best * t + s, 0)];
        out[(s, 1)] = trajs[(best * t + s, 1)];
    }
    Ok((best, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{slice_m2m, slice_p2p, MemoryQueue};
    use crate::geometry::Pose2;
    use ndarray::ArrayD;
    use rand::SeedableRng;

    fn dims() -> ModelDims {
        ModelDims {
            channels: 8,
            m_mot: 2,
            t_mot: 6,
            m_plan: 6,
            t_plan: 6,
            k_history: 3,
            t_m2m: 3,
            t_p2p: 3,
            ..ModelDims::default()
        }
    }

    fn store_for(d: &ModelDims, seed: u64) -> ParamStore {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        register_params(&mut store, d, &mut rng);
        store
    }

    fn fake_objset(sess: &mut Session, n: usize, c: usize) -> ObjectQuerySet {
        let q = Array2::from_shape_fn((n, c), |(i, j)| 0.1 * i as f64 + 0.01 * j as f64);
        ObjectQuerySet {
            queries: sess.g.leaf2(q),
            boxes: sess.g.leaf2(Array2::zeros((n, 11))),
            scores: sess.g.leaf2(Array2::zeros((n, 1))),
            obs_ids: (0..n as u64).collect(),
            classes: vec![crate::scene::AgentClass::Car; n],
            track_ids: (0..n as i64).collect(),
        }
    }

    fn empty_maps(sess: &mut Session, c: usize) -> MapQuerySet {
        MapQuerySet {
            queries: sess.g.leaf2(Array2::zeros((0, c))),
            points: sess.g.leaf2(Array2::zeros((0, 2))),
            class_logits: sess.g.leaf2(Array2::zeros((0, 3))),
            observed_classes: vec![],
            n_map: 0,
            n_points: 10,
        }
    }

    #[test]
    fn init_motion_shapes_and_identical_blocks() {
        let d = dims();
        let store = store_for(&d, 0);
        let mut sess = Session::new(&store);
        let mut objset = fake_objset(&mut sess, 2, d.channels);
        // make the two object queries identical
        let q = Array2::from_elem((2, d.channels), 0.5);
        objset.queries = sess.g.leaf2(q);
        let mot = init_motion_queries(&mut sess, &objset, &d);
        let v = sess.g.value2(mot.queries);
        assert_eq!(v.dim(), (2 * d.m_mot * d.t_mot, d.channels));
        for m in 0..d.m_mot {
            for s in 0..d.t_mot {
                assert_eq!(
                    v.row(mot.row(0, m, s)).to_owned(),
                    v.row(mot.row(1, m, s)).to_owned()
                );
            }
        }
    }

    #[test]
    fn distinct_step_embeddings_make_step_slices_differ() {
        let d = dims();
        let store = store_for(&d, 1);
        let mut sess = Session::new(&store);
        let objset = fake_objset(&mut sess, 1, d.channels);
        let mot = init_motion_queries(&mut sess, &objset, &d);
        let v = sess.g.value2(mot.queries);
        for s1 in 0..d.t_mot {
            for s2 in s1 + 1..d.t_mot {
                assert_ne!(
                    v.row(mot.row(0, 0, s1)).to_owned(),
                    v.row(mot.row(0, 0, s2)).to_owned()
                );
            }
        }
    }

    #[test]
    fn cold_start_cross_attention_identity() {
        let d = dims();
        let store = store_for(&d, 2);
        let queue = MemoryQueue::new(d.k_history);
        let m2m = slice_m2m(&queue, 0, &[0, 1], d.m_mot, d.t_m2m, d.t_mot, d.channels, Pose2::identity()).unwrap();
        let flags = AblationFlags {
            step_self_attn: false,
            mode_self_attn: false,
            ..AblationFlags::default()
        };
        let mut sess = Session::new(&store);
        let objset = fake_objset(&mut sess, 2, d.channels);
        let mot = init_motion_queries(&mut sess, &objset, &d);
        let before = sess.g.value2(mot.queries);
        let out = history_enhanced_motion(&mut sess, mot, &m2m, &flags).unwrap();
        assert_eq!(sess.g.value2(out.queries), before);
    }

    #[test]
    fn steps_beyond_fusion_window_untouched_without_self_attn() {
        let d = dims();
        let store = store_for(&d, 3);
        let mut queue = MemoryQueue::new(d.k_history);
        let c = d.channels;
        let mut mq = ArrayD::zeros(IxDyn(&[2, d.m_mot, d.t_mot, c]));
        mq.fill(0.7);
        queue
            .push(crate::memory::FrameCache {
                frame_index: 9,
                ego_pose: Pose2::identity(),
                agent_ids: vec![0, 1],
                motion_queries: mq,
                motion_trajs: ArrayD::zeros(IxDyn(&[2, d.m_mot, d.t_mot, 2])),
                motion_scores: ArrayD::zeros(IxDyn(&[2, d.m_mot])),
                plan_queries: ArrayD::zeros(IxDyn(&[d.m_plan, d.t_plan, c])),
                plan_trajs: ArrayD::zeros(IxDyn(&[d.m_plan, d.t_plan, 2])),
                plan_scores: ArrayD::zeros(IxDyn(&[d.m_plan])),
            })
            .unwrap();
        let m2m = slice_m2m(&queue, 10, &[0, 1], d.m_mot, d.t_m2m, d.t_mot, c, Pose2::identity()).unwrap();
        assert!(m2m.any_valid());
        let flags = AblationFlags {
            step_self_attn: false,
            mode_self_attn: false,
            ..AblationFlags::default()
        };
        let mut sess = Session::new(&store);
        let objset = fake_objset(&mut sess, 2, c);
        let mot = init_motion_queries(&mut sess, &objset, &d);
        let before = sess.g.value2(mot.queries);
        let t_mot = mot.t_mot;
        let out = history_enhanced_motion(&mut sess, mot, &m2m, &flags).unwrap();
        let after = sess.g.value2(out.queries);
        for u in 0..2 * d.m_mot {
            for s in 0..t_mot {
                let row = u * t_mot + s;
                if s >= d.t_m2m {
                    assert_eq!(before.row(row).to_owned(), after.row(row).to_owned());
                } else {
                    assert_ne!(before.row(row).to_owned(), after.row(row).to_owned());
                }
            }
        }
    }

    #[test]
    fn plan_cold_start_identity_and_shape() {
        let d = dims();
        let store = store_for(&d, 4);
        let queue = MemoryQueue::new(d.k_history);
        let p2p = slice_p2p(&queue, 0, d.m_plan, d.t_p2p, d.t_plan, d.channels, Pose2::identity()).unwrap();
        let flags = AblationFlags {
            step_self_attn: false,
            mode_self_attn: false,
            ..AblationFlags::default()
        };
        let mut sess = Session::new(&store);
        let maps = empty_maps(&mut sess, d.channels);
        let plan = init_plan_queries(&mut sess, &maps, &d);
        let before = sess.g.value2(plan.queries);
        assert_eq!(before.dim(), (d.m_plan * d.t_plan, d.channels));
        let out = history_enhanced_plan(&mut sess, plan, &p2p, &flags).unwrap();
        assert_eq!(sess.g.value2(out.queries), before);
    }

    #[test]
    fn select_with_score_argmax_and_tiebreak() {
        let d = dims();
        let store = store_for(&d, 5);
        let mut sess = Session::new(&store);
        let objset = fake_objset(&mut sess, 2, d.channels);
        let mot = init_motion_queries(&mut sess, &objset, &d);
        // uniform scores -> mode 0
        let scores = Array2::zeros((2, d.m_mot));
        let (_, winners) = select_with_score(&mut sess, &mot, &scores, d.t_plan);
        assert_eq!(winners, vec![0, 0]);
        // shifted scores keep the argmax
        let mut s2 = Array2::zeros((2, d.m_mot));
        s2[(0, 1)] = 0.3;
        s2[(1, 0)] = 0.1;
        let base_winner: Vec<usize> = {
            let (_, w) = select_with_score(&mut sess, &mot, &s2, d.t_plan);
            w
        };
        let shifted = &s2 + 5.0;
        let (_, w2) = select_with_score(&mut sess, &mot, &shifted, d.t_plan);
        assert_eq!(base_winner, w2);
    }

    #[test]
    fn mot2plan_identity_with_no_agents() {
        let d = dims();
        let store = store_for(&d, 6);
        let mut sess = Session::new(&store);
        let maps = empty_maps(&mut sess, d.channels);
        let plan = init_plan_queries(&mut sess, &maps, &d);
        let before = sess.g.value2(plan.queries);
        let sel = sess.g.leaf2(Array2::zeros((0, d.channels)));
        let out = mot2plan_interact(&mut sess, plan, sel, 0);
        assert_eq!(sess.g.value2(out.queries), before);
    }

    #[test]
    fn mot2plan_step_locality() {
        let d = dims();
        let store = store_for(&d, 7);
        let run = |perturb_step: Option<usize>| {
            let mut sess = Session::new(&store);
            let maps = empty_maps(&mut sess, d.channels);
            let plan = init_plan_queries(&mut sess, &maps, &d);
            let mut sel =
                Array2::from_shape_fn((1 * d.t_plan, d.channels), |(_, ch)| 0.1 * ch as f64);
            if let Some(s) = perturb_step {
                for (ch, v) in sel.row_mut(s).iter_mut().enumerate() {
                    *v = if ch % 2 == 0 { 0.9 } else { -0.3 };
                }
            }
            let selv = sess.g.leaf2(sel);
            let out = mot2plan_interact(&mut sess, plan, selv, 1);
            sess.g.value2(out.queries)
        };
        let base = run(None);
        let pert = run(Some(2));
        for mo in 0..d.m_plan {
            for s in 0..d.t_plan {
                let row = mo * d.t_plan + s;
                if s == 2 {
                    assert_ne!(base.row(row).to_owned(), pert.row(row).to_owned());
                } else {
                    assert_eq!(base.row(row).to_owned(), pert.row(row).to_owned());
                }
            }
        }
    }

    #[test]
    fn decode_cumsum_and_zero_offsets() {
        let d = dims();
        let mut store = store_for(&d, 8);
        store.get_mut("mot.head.offset.w").fill(0.0);
        store.get_mut("mot.head.offset.b").fill(0.0);
        {
            let mut sess = Session::new(&store);
            let objset = fake_objset(&mut sess, 1, d.channels);
            let mot = init_motion_queries(&mut sess, &objset, &d);
            let dec = decode_motion(&mut sess, &mot);
            assert!(sess.g.value2(dec.trajs).iter().all(|&x| x == 0.0));
        }
        // constant offset (1, 0) per step -> position (s+1, 0)
        store.get_mut("mot.head.offset.w").fill(0.0);
        let b = store.get_mut("mot.head.offset.b");
        b[IxDyn(&[0])] = 1.0;
        b[IxDyn(&[1])] = 0.0;
        let mut sess = Session::new(&store);
        let objset = fake_objset(&mut sess, 1, d.channels);
        let mot = init_motion_queries(&mut sess, &objset, &d);
        let dec = decode_motion(&mut sess, &mot);
        let t = sess.g.value2(dec.trajs);
        for s in 0..d.t_mot {
            assert!((t[(s, 0)] - (s + 1) as f64).abs() < 1e-12);
            assert_eq!(t[(s, 1)], 0.0);
        }
        // probs normalized
        let p = sess.g.value2(dec.probs);
        for row in p.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn plan_group_softmax_normalized() {
        let d = dims();
        let store = store_for(&d, 9);
        let mut sess = Session::new(&store);
        let maps = empty_maps(&mut sess, d.channels);
        let plan = init_plan_queries(&mut sess, &maps, &d);
        let dec = decode_plan(&mut sess, &plan);
        let p = sess.g.value2(dec.probs);
        for g in 0..3 {
            let sum: f64 = (0..plan.m_plan)
                .filter(|&m| plan.command_group[m] == g)
                .map(|m| p[(0, m)])
                .sum();
            assert!((sum - 1.0).abs() < 1e-6, "group {g} sums to {sum}");
        }
        // every command group is non-empty
        for cmd in [Command::Left, Command::Right, Command::Straight] {
            assert!(!plan.modes_for(cmd).is_empty());
        }
    }

    #[test]
    fn select_by_command_follows_permutation() {
        let d = dims();
        let store = store_for(&d, 10);
        let mut sess = Session::new(&store);
        let maps = empty_maps(&mut sess, d.channels);
        let plan = init_plan_queries(&mut sess, &maps, &d);
        let t = plan.t_plan;
        let trajs = Array2::from_shape_fn((plan.m_plan * t, 2), |(r, c)| {
            (r / t) as f64 * 100.0 + (r % t) as f64 + c as f64 * 0.5
        });
        let mut probs = Array2::zeros((1, plan.m_plan));
        let straight = plan.modes_for(Command::Straight);
        probs[(0, straight[1])] = 0.9;
        let (m1, tr1) = select_by_command(&plan, &trajs, &probs, Command::Straight).unwrap();
        assert_eq!(m1, straight[1]);
        // permute scores within the group: winner follows
        let mut probs2 = Array2::zeros((1, plan.m_plan));
        probs2[(0, straight[0])] = 0.9;
        let (m2, tr2) = select_by_command(&plan, &trajs, &probs2, Command::Straight).unwrap();
        assert_eq!(m2, straight[0]);
        assert_ne!(tr1, tr2);
    }
}
