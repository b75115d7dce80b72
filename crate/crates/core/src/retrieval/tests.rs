use super::*;
use crate::scoring::{OracleModel, Trace};
use crate::synthworld::{gen_play_set, gen_task, rollout_with, RolloutMode, RolloutOptions};
use proptest::prelude::*;

fn expert_play(seed: u64) -> PlayTrajectory {
    let task = gen_task(seed);
    let opts = RolloutOptions {
        pause_frames: 2,
        ..Default::default()
    };
    PlayTrajectory {
        rollout: rollout_with(&task, RolloutMode::Expert, 18, seed, opts).unwrap(),
    }
}

#[test]
fn expert_rollout_splits_at_toggles() {
    for seed in 0..20 {
        let p = expert_play(seed);
        let segs = segment(&p, &SegmentConfig::default());
        assert!(!segs.is_empty() && segs.len() <= 3);
        let g = p.grasp_flags();
        let toggles: Vec<usize> = (1..g.len()).filter(|&t| g[t] != g[t - 1]).collect();
        for s in &segs[1..] {
            assert!(toggles.iter().any(|&t| s.start.abs_diff(t) <= 1), "seed {seed}: cut {} vs {toggles:?}", s.start);
        }
        assert_eq!(segs[0].start, 0);
        assert_eq!(segs.last().unwrap().end, p.rollout.trajectory.num_frames);
    }
}

#[test]
fn no_grasp_constant_speed_is_one_segment() {
    let b = segment_bounds(&[0.05; 20], &[false; 20], false, &SegmentConfig::default());
    assert_eq!(b, vec![(0, 20)]);
}

proptest! {
    #[test]
    fn merged_segments_respect_min_frames(
        v in proptest::collection::vec((0.0f64..0.05, any::<bool>()), 5..40),
        init in any::<bool>(),
    ) {
        let speed: Vec<f64> = v.iter().map(|x| x.0).collect();
        let grasp: Vec<bool> = v.iter().map(|x| x.1).collect();
        let cfg = SegmentConfig::default();
        let b = segment_bounds(&speed, &grasp, init, &cfg);
        prop_assert_eq!(b[0].0, 0);
        prop_assert_eq!(b.last().unwrap().1, v.len());
        for w in b.windows(2) {
            prop_assert_eq!(w[0].1, w[1].0);
        }
        for r in &b {
            prop_assert!(r.1 - r.0 >= cfg.min_frames);
        }
    }
}

#[test]
fn oracle_voc_prefers_query_task() {
    let play = vec![expert_play(1), expert_play(2)];
    let oracle = OracleModel::from_play(&play);
    let segs: Vec<Subtrajectory<'_>> = play.iter().flat_map(|p| segment(p, &SegmentConfig::default())).collect();
    let query = &play[0].rollout.task.instruction;
    let top = rank_by_voc(&segs, query, &oracle, segs.len()).unwrap();
    assert_eq!(top[0].seg.parent_id(), play[0].rollout.trajectory.id);
    let mut got: Vec<(String, usize)> = top.iter().map(|r| (r.seg.parent_id().to_string(), r.seg.start)).collect();
    let mut want: Vec<(String, usize)> = segs.iter().map(|s| (s.parent_id().to_string(), s.start)).collect();
    got.sort();
    want.sort();
    assert_eq!(got, want);
    assert!(rank_by_voc(&segs, query, &oracle, segs.len() + 1).is_err());
    assert!(rank_by_voc(&[], query, &oracle, 0).is_err());
}

#[test]
fn oracle_voc_retrieves_query_segments_from_play_set() {
    let tasks: Vec<_> = (100..105).map(gen_task).collect();
    let play = gen_play_set(&tasks, 4, 9).unwrap();
    let oracle = OracleModel::from_play(&play);
    let segs: Vec<Subtrajectory<'_>> = play.iter().flat_map(|p| segment(p, &SegmentConfig::default())).collect();
    for task in &tasks {
        let own = segs.iter().filter(|s| s.traj.instruction == task.instruction).count();
        let k = own.min(5);
        let top = rank_by_voc(&segs, &task.instruction, &oracle, k).unwrap();
        let hits = top.iter().filter(|r| r.seg.traj.instruction == task.instruction).count();
        assert!(hits as f64 >= 0.9 * k as f64, "{hits}/{k}");
    }
}

/// Fixed tournament: the stronger parent always wins.
struct Tournament {
    strength: Vec<(String, i32)>,
}

impl Tournament {
    fn of(&self, c: &ClipRef<'_>) -> i32 {
        self.strength.iter().find(|s| s.0 == c.traj.id).map_or(0, |s| s.1)
    }
}

impl RewardModel for Tournament {
    fn trace(&self, _: &str, clip: &ClipRef<'_>) -> Result<Trace> {
        let s = self.of(clip) as f64;
        Ok(Trace {
            progress: (0..clip.len()).map(|i| s * i as f64).collect(),
            success: vec![0.0; clip.len()],
        })
    }
    fn prefer(&self, _: &str, a: &ClipRef<'_>, b: &ClipRef<'_>) -> Result<f64> {
        Ok(match self.of(a).cmp(&self.of(b)) {
            Ordering::Greater => 0.9,
            Ordering::Less => 0.1,
            Ordering::Equal => 0.5,
        })
    }
}

fn three() -> Vec<Trajectory> {
    (0..3)
        .map(|i| {
            let mut t = expert_play(i).rollout.trajectory;
            t.id = format!("seg{i}");
            t
        })
        .collect()
}

#[test]
fn copeland_winner_ranks_first() {
    let trajs = three();
    let segs: Vec<Subtrajectory<'_>> = trajs.iter().map(|t| Subtrajectory { traj: t, start: 0, end: 6 }).collect();
    let m = Tournament {
        strength: vec![("seg0".into(), 1), ("seg1".into(), 3), ("seg2".into(), 2)],
    };
    let r = rank_by_winmatrix(&segs, "x", &m, 9, 3, 0).unwrap();
    let ids: Vec<&str> = r.iter().map(|x| x.seg.parent_id()).collect();
    assert_eq!(ids, ["seg1", "seg2", "seg0"]);
    assert_eq!(r.iter().map(|x| x.score).collect::<Vec<_>>(), [2.0, 0.0, -2.0]);
    assert!(rank_by_winmatrix(&segs, "x", &m, 2, 3, 0).is_err());
}

#[test]
fn all_ties_fall_back_to_voc() {
    let trajs = three();
    let segs: Vec<Subtrajectory<'_>> = trajs.iter().map(|t| Subtrajectory { traj: t, start: 0, end: 6 }).collect();
    // Equal strength everywhere: every comparison ties.
    struct Flat;
    impl RewardModel for Flat {
        fn trace(&self, _: &str, clip: &ClipRef<'_>) -> Result<Trace> {
            let slope = match clip.traj.id.as_str() {
                "seg0" => -1.0,
                "seg1" => 1.0,
                _ => 0.0,
            };
            Ok(Trace {
                progress: (0..clip.len()).map(|i| slope * i as f64).collect(),
                success: vec![0.0; clip.len()],
            })
        }
        fn prefer(&self, _: &str, _: &ClipRef<'_>, _: &ClipRef<'_>) -> Result<f64> {
            Ok(0.5)
        }
    }
    let r = rank_by_winmatrix(&segs, "x", &Flat, 9, 3, 0).unwrap();
    let ids: Vec<&str> = r.iter().map(|x| x.seg.parent_id()).collect();
    assert_eq!(ids, ["seg1", "seg2", "seg0"]);
}

#[test]
fn saturated_budget_equals_full_pairs_and_sampling_is_deterministic() {
    let tasks: Vec<_> = (0..3).map(gen_task).collect();
    let play = gen_play_set(&tasks, 2, 1).unwrap();
    let oracle = OracleModel::from_play(&play);
    let segs: Vec<Subtrajectory<'_>> = play.iter().flat_map(|p| segment(p, &SegmentConfig::default())).collect();
    let n = segs.len();
    let q = &tasks[0].instruction;
    let full = rank_by_winmatrix(&segs, q, &oracle, n * n, n, 0).unwrap();
    let inf = rank_by_winmatrix(&segs, q, &oracle, usize::MAX, n, 5).unwrap();
    assert_eq!(full, inf);
    let a = rank_by_winmatrix(&segs, q, &oracle, n + 2, n, 11).unwrap();
    let b = rank_by_winmatrix(&segs, q, &oracle, n + 2, n, 11).unwrap();
    assert_eq!(a, b);
}
