//! Property tests for the geometric primitives and the historical query
//! memory: randomized inputs, structural invariants.

use ndarray::{ArrayD, IxDyn};
use proptest::prelude::*;

use bridgead_core::config::FRAME_DT;
use bridgead_core::geometry::{boxes_overlap, normalize_angle, OrientedBox2, Pose2};
use bridgead_core::memory::{slice_m2d, FrameCache, MemoryQueue};

fn pose_strategy() -> impl Strategy<Value = Pose2> {
    (-50.0..50.0f64, -50.0..50.0f64, -3.2..3.2f64).prop_map(|(x, y, yaw)| Pose2 { x, y, yaw })
}

fn box_strategy() -> impl Strategy<Value = OrientedBox2> {
    (
        -20.0..20.0f64,
        -20.0..20.0f64,
        0.2..8.0f64,
        0.2..4.0f64,
        -3.2..3.2f64,
    )
        .prop_map(|(cx, cy, l, w, yaw)| OrientedBox2::new(cx, cy, l, w, yaw))
}

proptest! {
    #[test]
    fn pose_compose_is_associative(a in pose_strategy(), b in pose_strategy(), c in pose_strategy()) {
        let left = Pose2::compose(Pose2::compose(a, b), c);
        let right = Pose2::compose(a, Pose2::compose(b, c));
        prop_assert!((left.x - right.x).abs() < 1e-9);
        prop_assert!((left.y - right.y).abs() < 1e-9);
        prop_assert!(normalize_angle(left.yaw - right.yaw).abs() < 1e-9);
    }

    #[test]
    fn pose_transform_round_trips(p in pose_strategy(), x in -100.0..100.0f64, y in -100.0..100.0f64) {
        let world = p.transform_point((x, y));
        let back = p.inverse_transform_point(world);
        prop_assert!((back.0 - x).abs() < 1e-9);
        prop_assert!((back.1 - y).abs() < 1e-9);
    }

    #[test]
    fn pose_inverse_cancels(p in pose_strategy()) {
        let id = Pose2::compose(p, p.inverse());
        prop_assert!(id.x.abs() < 1e-9);
        prop_assert!(id.y.abs() < 1e-9);
        prop_assert!(normalize_angle(id.yaw).abs() < 1e-9);
    }

    #[test]
    fn normalize_angle_is_canonical(a in -100.0..100.0f64) {
        let n = normalize_angle(a);
        prop_assert!(n > -std::f64::consts::PI - 1e-12 && n <= std::f64::consts::PI + 1e-12);
        let k = (a - n) / std::f64::consts::TAU;
        prop_assert!((k - k.round()).abs() < 1e-9);
    }

    #[test]
    fn box_overlap_is_symmetric_and_reflexive(a in box_strategy(), b in box_strategy(),
                                              dx in -30.0..30.0f64, dy in -30.0..30.0f64) {
        prop_assert_eq!(boxes_overlap(&a, &b), boxes_overlap(&b, &a));
        prop_assert!(boxes_overlap(&a, &a));
        // translation invariance
        let shift = |bx: &OrientedBox2| OrientedBox2::new(bx.cx + dx, bx.cy + dy, bx.length, bx.width, bx.yaw);
        prop_assert_eq!(boxes_overlap(&shift(&a), &shift(&b)), boxes_overlap(&a, &b));
    }
}

fn cache(frame_index: usize, agent_ids: Vec<u64>) -> FrameCache {
    let (n, m, t, c) = (agent_ids.len(), 2, 5, 3);
    let mut motion_queries = ArrayD::zeros(IxDyn(&[n, m, t, c]));
    for (i, v) in motion_queries.iter_mut().enumerate() {
        *v = frame_index as f64 * 1000.0 + i as f64;
    }
    FrameCache {
        frame_index,
        ego_pose: Pose2::identity(),
        agent_ids,
        motion_queries,
        motion_trajs: ArrayD::zeros(IxDyn(&[n, m, t, 2])),
        motion_scores: ArrayD::zeros(IxDyn(&[n, m])),
        plan_queries: ArrayD::zeros(IxDyn(&[2, t, c])),
        plan_trajs: ArrayD::zeros(IxDyn(&[2, t, 2])),
        plan_scores: ArrayD::zeros(IxDyn(&[2])),
    }
}

proptest! {
    #[test]
    fn queue_keeps_k_most_recent_in_order(k in 1usize..5, gaps in prop::collection::vec(1usize..3, 0..10)) {
        let mut queue = MemoryQueue::new(k);
        let mut indices = Vec::new();
        let mut f = 0usize;
        for g in &gaps {
            f += g;
            indices.push(f);
            queue.push(cache(f, vec![0, 1])).unwrap();
        }
        let want: Vec<usize> = indices.iter().rev().take(k).rev().copied().collect();
        let got: Vec<usize> = queue.entries().map(|e| e.frame_index).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn slices_are_time_aligned(k in 1usize..4, gaps in prop::collection::vec(1usize..3, 1..8), ahead in 1usize..3) {
        let mut queue = MemoryQueue::new(k);
        let mut f = 0usize;
        for g in &gaps {
            f += g;
            queue.push(cache(f, vec![7])).unwrap();
        }
        let t = f + ahead;
        let s = slice_m2d(&queue, t, &[7], 3, Pose2::identity());
        for slot in 0..k {
            if s.mask[IxDyn(&[0, slot])] {
                // a valid slot's selected step must land exactly on "now"
                prop_assert!((s.timestamps[IxDyn(&[0, slot])] - t as f64 * FRAME_DT).abs() < 1e-12);
                prop_assert_eq!(s.lags[slot], slot + 1);
            }
        }
    }

    #[test]
    fn rejects_non_monotone_pushes(f0 in 1usize..10) {
        let mut queue = MemoryQueue::new(3);
        queue.push(cache(f0, vec![0])).unwrap();
        prop_assert!(queue.push(cache(f0, vec![0])).is_err());
    }
}
