//! Detection, tracking, and mapping heads over observation frames, plus the
//! historical Mot2Det fusion block that injects time-aligned cached motion
//! queries into the object queries.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::config::ModelDims;
use crate::error::{Error, Result};
use crate::memory::HistorySlice;
use crate::nn::{register_attn_block, register_ffn_block, ParamStore, Session};
use crate::scene::{AgentClass, MapClass, ObservationFrame};

/// 11-number anchor box {x, y, z, ln w, ln h, ln l, sin yaw, cos yaw,
/// vx, vy, vz}.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorBox11 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub ln_w: f64,
    pub ln_h: f64,
    pub ln_l: f64,
    pub sin_yaw: f64,
    pub cos_yaw: f64,
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
}

pub const SIN_COL: usize = 6;
pub const COS_COL: usize = 7;

impl AnchorBox11 {
    pub fn to_array(self) -> [f64; 11] {
        [
            self.x, self.y, self.z, self.ln_w, self.ln_h, self.ln_l, self.sin_yaw,
            self.cos_yaw, self.vx, self.vy, self.vz,
        ]
    }

    pub fn from_row(r: &[f64]) -> Self {
        assert_eq!(r.len(), 11);
        Self {
            x: r[0],
            y: r[1],
            z: r[2],
            ln_w: r[3],
            ln_h: r[4],
            ln_l: r[5],
            sin_yaw: r[6],
            cos_yaw: r[7],
            vx: r[8],
            vy: r[9],
            vz: r[10],
        }
    }

    pub fn yaw(&self) -> f64 {
        self.sin_yaw.atan2(self.cos_yaw)
    }

    pub fn width(&self) -> f64 {
        self.ln_w.exp()
    }

    pub fn length(&self) -> f64 {
        self.ln_l.exp()
    }

    /// Rescale the sin/cos pair to unit norm.
    pub fn normalized_heading(mut self) -> Self {
        let r = (self.sin_yaw * self.sin_yaw + self.cos_yaw * self.cos_yaw).sqrt();
        if r > 0.0 {
            self.sin_yaw /= r;
            self.cos_yaw /= r;
        }
        self
    }
}

/// Object queries with their anchor boxes, scores, and track identities.
/// Tape handles are valid for the [`Session`] that produced them.
pub struct ObjectQuerySet {
    /// [N_a, C]
    pub queries: Var,
    /// [N_a, 11]
    pub boxes: Var,
    /// [N_a, 1] detection probabilities in [0, 1]
    pub scores: Var,
    /// Source observation identity per query (drives ID tracking).
    pub obs_ids: Vec<u64>,
    pub classes: Vec<AgentClass>,
    /// -1 when unassigned.
    pub track_ids: Vec<i64>,
}

impl ObjectQuerySet {
    pub fn len(&self) -> usize {
        self.obs_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs_ids.is_empty()
    }
}

/// Feature tokens standing in for image features: encoded agent and map
/// observations, [N_tokens, C].
pub struct ObservationFeatures {
    pub tokens: Var,
}

pub struct MapQuerySet {
    /// [N_map, C]
    pub queries: Var,
    /// [N_map * P, 2]
    pub points: Var,
    /// [N_map, 3]
    pub class_logits: Var,
    pub observed_classes: Vec<MapClass>,
    pub n_map: usize,
    pub n_points: usize,
}

pub fn register_params(store: &mut ParamStore, dims: &ModelDims, rng: &mut ChaCha12Rng) {
    let c = dims.channels;
    store.register_linear("enc.obs.fc1", 11, c, rng);
    store.register_linear("enc.obs.fc2", c, c, rng);
    store.register_embedding("enc.cls", 2, c, rng);
    for l in 0..dims.decoder_layers {
        register_attn_block(store, &format!("det.l{l}.self"), c, rng);
        register_attn_block(store, &format!("det.l{l}.cross"), c, rng);
        register_ffn_block(store, &format!("det.l{l}.ffn"), c, c, rng);
    }
    store.register_linear("det.refine.offset", c, 11, rng);
    store.register_linear("det.refine.score", c, 1, rng);
    register_attn_block(store, "m2d.attn", c, rng);
    store.register_linear("m2d.pos.fc1", 4, c, rng);
    store.register_linear("m2d.pos.fc2", c, c, rng);
    store.register_linear("m2d.refine.offset", c, 11, rng);
    store.register_linear("m2d.refine.score", c, 1, rng);

    let p2 = dims.map_points * 2;
    store.register_linear("map.enc.fc1", p2, c, rng);
    store.register_linear("map.enc.fc2", c, c, rng);
    for l in 0..dims.decoder_layers {
        register_attn_block(store, &format!("map.l{l}.self"), c, rng);
        register_ffn_block(store, &format!("map.l{l}.ffn"), c, c, rng);
    }
    store.register_linear("map.head.points", c, p2, rng);
    store.register_linear("map.head.cls", c, 3, rng);
}

fn class_index(c: AgentClass) -> usize {
    match c {
        AgentClass::Car => 0,
        AgentClass::Pedestrian => 1,
    }
}

/// Embed each observed anchor box into a C-channel query and emit the
/// feature tokens the decoder cross-attends to.
pub fn encode_observations(
    sess: &mut Session,
    frame: &ObservationFrame,
    dims: &ModelDims,
) -> (ObjectQuerySet, ObservationFeatures) {
    let c = dims.channels;
    let n = frame.agent_obs.len();
    let mut box_mat = Array2::zeros((n, 11));
    for (i, obs) in frame.agent_obs.iter().enumerate() {
        box_mat.row_mut(i).assign(&Array1::from_vec(obs.box11.to_array().to_vec()));
    }
    let boxes = sess.g.leaf2(box_mat.clone());
    let queries = if n > 0 {
        let x = sess.g.leaf2(box_mat);
        let emb = sess.mlp("enc.obs", x);
        let cls_emb = sess.p("enc.cls");
        let idx: Vec<usize> = frame.agent_obs.iter().map(|o| class_index(o.class)).collect();
        let cls_rows = sess.g.select_rows(cls_emb, &idx);
        sess.g.add(emb, cls_rows)
    } else {
        sess.g.leaf2(Array2::zeros((0, c)))
    };
    // map tokens join the feature set
    let map_tokens = encode_map_tokens(sess, frame, dims);
    let tokens = match map_tokens {
        Some(mt) if n > 0 => sess.g.concat_rows(&[queries, mt]),
        Some(mt) => mt,
        None => queries,
    };
    let scores = {
        let z = sess.g.leaf2(Array2::zeros((n, 1)));
        sess.g.add_scalar(z, 0.0)
    };
    (
        ObjectQuerySet {
            queries,
            boxes,
            scores,
            obs_ids: frame.agent_obs.iter().map(|o| o.agent_id).collect(),
            classes: frame.agent_obs.iter().map(|o| o.class).collect(),
            track_ids: vec![-1; n],
        },
        ObservationFeatures { tokens },
    )
}

fn encode_map_tokens(sess: &mut Session, frame: &ObservationFrame, dims: &ModelDims) -> Option<Var> {
    if frame.map_obs.is_empty() {
        return None;
    }
    let p = dims.map_points;
    let mut flat = Array2::zeros((frame.map_obs.len(), p * 2));
    for (i, pl) in frame.map_obs.iter().enumerate() {
        assert_eq!(pl.points.len(), p, "map observations must be resampled to P points");
        for (j, &(x, y)) in pl.points.iter().enumerate() {
            flat[(i, 2 * j)] = x;
            flat[(i, 2 * j + 1)] = y;
        }
    }
    let x = sess.g.leaf2(flat);
    Some(sess.mlp("map.enc", x))
}

/// Refinement head shared by the decoder layers: additive box offsets with
/// heading renormalization, plus fresh sigmoid scores.
fn refine(sess: &mut Session, prefix: &str, queries: Var, boxes: Var) -> (Var, Var) {
    let offsets = sess.linear(&format!("{prefix}.offset"), queries);
    let boxes = sess.g.add(boxes, offsets);
    let boxes = sess.g.normalize_unit_pair_cols(boxes, SIN_COL, COS_COL);
    let logits = sess.linear(&format!("{prefix}.score"), queries);
    let scores = sess.g.sigmoid(logits);
    (boxes, scores)
}

/// Attention-based decoder: per layer, self-attention among object queries,
/// cross-attention to the observation features, and a feed-forward block,
/// each refining the anchor boxes additively.
pub fn detection_decoder(
    sess: &mut Session,
    objset: ObjectQuerySet,
    feats: &ObservationFeatures,
    layers: usize,
) -> ObjectQuerySet {
    assert!(layers >= 1);
    if objset.is_empty() {
        return objset;
    }
    let n = objset.len();
    let n_tok = sess.g.value2(feats.tokens).nrows();
    let mut q = objset.queries;
    let mut boxes = objset.boxes;
    let mut scores = objset.scores;
    for l in 0..layers {
        let self_mask = Array2::from_elem((n, n), true);
        q = sess.attn_block(&format!("det.l{l}.self"), q, q, &self_mask);
        let cross_mask = Array2::from_elem((n, n_tok), true);
        q = sess.attn_block(&format!("det.l{l}.cross"), q, feats.tokens, &cross_mask);
        q = sess.ffn_block(&format!("det.l{l}.ffn"), q);
        let (b, s) = refine(sess, "det.refine", q, boxes);
        boxes = b;
        scores = s;
    }
    ObjectQuerySet {
        queries: q,
        boxes,
        scores,
        ..objset
    }
}

/// Historical Mot2Det fusion: object queries cross-attend to their own
/// cached time-aligned motion queries, then the refinement head re-emits
/// scores and box offsets. With an all-invalid mask the queries pass
/// through bitwise unchanged.
pub fn mot2det_fuse(
    sess: &mut Session,
    objset: ObjectQuerySet,
    m2d: &HistorySlice,
) -> Result<ObjectQuerySet> {
    let n = objset.len();
    if n == 0 {
        return Ok(objset);
    }
    let k = m2d.lags.len();
    let shape = m2d.queries.shape();
    if shape[0] != n {
        return Err(Error::Alignment(format!(
            "mot2det_fuse: slice has {} agents, object set has {n}",
            shape[0]
        )));
    }
    let c = shape[2];
    let q = objset.queries;
    if !m2d.any_valid() {
        let (boxes, scores) = refine(sess, "m2d.refine", q, objset.boxes);
        return Ok(ObjectQuerySet {
            queries: q,
            boxes,
            scores,
            ..objset
        });
    }
    // keys: cached queries plus a learned embedding of (x, y, lag, step)
    let flat_q = Array2::from_shape_vec((n * k, c), m2d.queries.iter().copied().collect()).unwrap();
    let mut geo = Array2::zeros((n * k, 4));
    for a in 0..n {
        for s in 0..k {
            geo[(a * k + s, 0)] = m2d.positions[ndarray::IxDyn(&[a, s, 0])];
            geo[(a * k + s, 1)] = m2d.positions[ndarray::IxDyn(&[a, s, 1])];
            geo[(a * k + s, 2)] = m2d.lags[s] as f64;
        }
    }
    let cached = sess.g.leaf2(flat_q);
    let geo_leaf = sess.g.leaf2(geo);
    let pos_emb = sess.mlp("m2d.pos", geo_leaf);
    let keys = sess.g.add(cached, pos_emb);
    // block-diagonal validity: each query sees only its own history
    let mut mask = Array2::from_elem((n, n * k), false);
    for a in 0..n {
        for s in 0..k {
            mask[(a, a * k + s)] = m2d.mask[ndarray::IxDyn(&[a, s])];
        }
    }
    let q = sess.attn_block("m2d.attn", q, keys, &mask);
    let (boxes, scores) = refine(sess, "m2d.refine", q, objset.boxes);
    Ok(ObjectQuerySet {
        queries: q,
        boxes,
        scores,
        ..objset
    })
}

/// ID assignment: queries whose source observation persisted from the
/// previous frame keep their track ID; new confident queries get fresh IDs.
pub fn assign_track_ids(
    objset: &mut ObjectQuerySet,
    previous: Option<&TrackTable>,
    scores: &[f64],
    score_threshold: f64,
    next_id: &mut i64,
) {
    assert_eq!(scores.len(), objset.len());
    for i in 0..objset.len() {
        let carried = previous.and_then(|t| t.lookup(objset.obs_ids[i]));
        objset.track_ids[i] = match carried {
            Some(id) => id,
            None if scores[i] >= score_threshold => {
                let id = *next_id;
                *next_id += 1;
                id
            }
            None => -1,
        };
    }
}

/// Track identities carried between frames.
#[derive(Clone, Debug, Default)]
pub struct TrackTable {
    pairs: Vec<(u64, i64)>,
}

impl TrackTable {
    pub fn from_objset(objset: &ObjectQuerySet) -> Self {
        Self {
            pairs: objset
                .obs_ids
                .iter()
                .copied()
                .zip(objset.track_ids.iter().copied())
                .filter(|&(_, t)| t >= 0)
                .collect(),
        }
    }

    pub fn lookup(&self, obs_id: u64) -> Option<i64> {
        self.pairs.iter().find(|&&(o, _)| o == obs_id).map(|&(_, t)| t)
    }
}

/// Map head mirroring the detection structure: polyline observations are
/// encoded to queries, refined by self-attention, and decoded back to point
/// sets plus class scores.
pub fn map_head(sess: &mut Session, frame: &ObservationFrame, dims: &ModelDims) -> MapQuerySet {
    let p = dims.map_points;
    let n = frame.map_obs.len();
    if n == 0 {
        let queries = sess.g.leaf2(Array2::zeros((0, dims.channels)));
        let points = sess.g.leaf2(Array2::zeros((0, 2)));
        let class_logits = sess.g.leaf2(Array2::zeros((0, 3)));
        return MapQuerySet {
            queries,
            points,
            class_logits,
            observed_classes: Vec::new(),
            n_map: 0,
            n_points: p,
        };
    }
    let mut q = encode_map_tokens(sess, frame, dims).unwrap();
    for l in 0..dims.decoder_layers {
        let mask = Array2::from_elem((n, n), true);
        q = sess.attn_block(&format!("map.l{l}.self"), q, q, &mask);
        q = sess.ffn_block(&format!("map.l{l}.ffn"), q);
    }
    // observed points + regressed offsets
    let mut obs_pts = Array2::zeros((n * p, 2));
    for (i, pl) in frame.map_obs.iter().enumerate() {
        for (j, &(x, y)) in pl.points.iter().enumerate() {
            obs_pts[(i * p + j, 0)] = x;
            obs_pts[(i * p + j, 1)] = y;
        }
    }
    let base = sess.g.leaf2(obs_pts);
    let flat_off = sess.linear("map.head.points", q); // [n, 2P]
    // reshape [n, 2P] -> [n*P, 2] via gather of a constant index pattern
    let off = reshape_rows(sess, flat_off, n, p);
    let points = sess.g.add(base, off);
    let class_logits = sess.linear("map.head.cls", q);
    MapQuerySet {
        queries: q,
        points,
        class_logits,
        observed_classes: frame.map_obs.iter().map(|pl| pl.class).collect(),
        n_map: n,
        n_points: p,
    }
}

/// [n, 2P] -> [n*P, 2] without leaving the tape: split columns by matmul
/// with constant selection matrices, then interleave by row selection.
fn reshape_rows(sess: &mut Session, flat: Var, n: usize, p: usize) -> Var {
    let two_p = 2 * p;
    // selection matrix [2P, 2] for point j: rows 2j, 2j+1
    let mut parts = Vec::with_capacity(p);
    for j in 0..p {
        let mut sel = Array2::zeros((two_p, 2));
        sel[(2 * j, 0)] = 1.0;
        sel[(2 * j + 1, 1)] = 1.0;
        let m = sess.g.leaf2(sel);
        parts.push(sess.g.matmul(flat, m)); // [n, 2]
    }
    let stacked = sess.g.concat_rows(&parts); // [p*n, 2] grouped by point index
    // reorder to polyline-major: row (i*p + j) <- stacked row (j*n + i)
    let mut idx = Vec::with_capacity(n * p);
    for i in 0..n {
        for j in 0..p {
            idx.push(j * n + i);
        }
    }
    sess.g.select_rows(stacked, &idx)
}
