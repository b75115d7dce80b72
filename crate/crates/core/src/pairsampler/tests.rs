use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

use super::*;

fn traj(id: &str, source: &str, instruction: &str, quality: Quality, final_progress: Option<f64>, n: usize) -> Trajectory {
    Trajectory {
        id: id.into(),
        source: source.into(),
        instruction: instruction.into(),
        quality,
        final_progress,
        num_frames: n,
        frames: (0..n)
            .map(|t| Frame {
                channels: 1,
                height: 1,
                width: 1,
                data: vec![t as f32 / 64.0],
            })
            .collect(),
        cutoff: None,
    }
}

fn expert(id: &str, source: &str, instruction: &str, n: usize) -> Trajectory {
    traj(id, source, instruction, Quality::Expert, Some(1.0), n)
}

/// Four instructions over two sources, each with an expert and a failure.
fn mixed_dataset() -> Dataset {
    let mut v = Vec::new();
    for (i, instr) in ["pick red", "pick blue", "push red", "push blue"].iter().enumerate() {
        let src = if i % 2 == 0 { "s0" } else { "s1" };
        for r in 0..3 {
            v.push(expert(&format!("e{i}-{r}"), src, instr, 10 + 3 * r + i));
        }
        v.push(traj(&format!("f{i}"), src, instr, Quality::Fail, None, 12));
        v.push(traj(&format!("u{i}"), src, instr, Quality::Unlabeled, None, 12));
    }
    Dataset::new(v)
}

fn is_strictly_increasing(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

#[test]
fn trim_identity_when_lengths_match() {
    assert_eq!(trim_with(0, 7, 8), (0..8).collect::<Vec<_>>());
    let mut rng = rng_for(&[1]);
    assert_eq!(trim_subsequence(8, 8, 5, &mut rng).unwrap(), (0..8).collect::<Vec<_>>());
}

#[test]
fn trim_rejects_short_trajectories() {
    let mut rng = rng_for(&[1]);
    assert!(matches!(trim_subsequence(4, 8, 5, &mut rng), Err(Error::Ineligible(_))));
    // Between min_frames and t_model the clip is stretched with repeats.
    let idx = trim_subsequence(6, 8, 5, &mut rng).unwrap();
    assert_eq!(idx.len(), 8);
    assert_eq!((idx[0], idx[7]), (0, 5));
    assert!(idx.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn trim_start_is_uniform() {
    let mut rng = rng_for(&[2024]);
    let bins = 32 - 8 + 1;
    let mut counts = vec![0usize; bins];
    let draws = 10_000;
    for _ in 0..draws {
        let idx = trim_subsequence(32, 8, 5, &mut rng).unwrap();
        counts[idx[0]] += 1;
    }
    let expected = draws as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // Upper 1% point of chi-squared with 24 degrees of freedom.
    assert!(chi2 < 42.980, "chi2 = {chi2}, counts {counts:?}");
}

proptest! {
    #[test]
    fn trim_indices_strictly_increasing(n in 8usize..64, t_model in 2usize..9, seed in any::<u64>()) {
        let mut rng = rng_for(&[seed]);
        let idx = trim_subsequence(n, t_model, 2, &mut rng).unwrap();
        prop_assert_eq!(idx.len(), t_model);
        prop_assert!(is_strictly_increasing(&idx));
        prop_assert!(*idx.last().unwrap() < n);
    }

    #[test]
    fn trim_with_hits_both_endpoints(start in 0usize..20, extra in 7usize..30, t_model in 2usize..9) {
        let end = start + extra;
        let idx = trim_with(start, end, t_model);
        prop_assert_eq!(idx[0], start);
        prop_assert_eq!(*idx.last().unwrap(), end);
        prop_assert!(is_strictly_increasing(&idx));
    }
}

#[test]
fn rewind_suffix_index_sequence() {
    // 1-based t1=2, t2=4, t3=7.
    let seq: Vec<usize> = rewind_indices(1, 3, 6, RewindVariant::Suffix).iter().map(|i| i + 1).collect();
    assert_eq!(seq, vec![2, 3, 4, 5, 6, 7, 6, 5, 4]);
}

#[test]
fn full_reverse_targets_strictly_decrease() {
    let t = expert("e", "s", "go", 8);
    let full = apply_cutoff(&t, 0.9).unwrap();
    let cfg = SamplerConfig::default();
    let ex = rewind_from(&t, &full, &cfg, [0, 3, 7], RewindVariant::Reverse, false);
    assert_eq!(ex.pref_target, Slot::B);
    assert_eq!(ex.indices_a.iter().map(|i| i + 1).collect::<Vec<_>>(), vec![8, 7, 6, 5, 4, 3, 2, 1]);
    assert!(ex.targets_a.progress.windows(2).all(|w| w[1] < w[0]));
    assert_eq!(ex.indices_b, (0..8).collect::<Vec<_>>());
}

#[test]
fn rewind_labels_always_name_chosen_slot() {
    let cfg = SamplerConfig::default();
    let mut rng = rng_for(&[9]);
    let mut in_a = 0;
    for i in 0..1000 {
        let t = expert("e", "s", "go", 8 + i % 30);
        let ex = rewind_augment(&t, &mut rng, &cfg).unwrap();
        let (chosen, rejected) = match ex.pref_target {
            Slot::A => (&ex.indices_a, &ex.indices_b),
            Slot::B => (&ex.indices_b, &ex.indices_a),
        };
        assert!(chosen.windows(2).all(|w| w[0] <= w[1]));
        assert!(rejected.windows(2).any(|w| w[1] < w[0]));
        if ex.pref_target == Slot::B {
            assert!(ex.targets_a.progress.windows(2).any(|w| w[1] < w[0]));
        } else {
            in_a += 1;
        }
        assert_eq!(ex.frames_a.len(), 8);
        assert_eq!(ex.frames_b.len(), 8);
    }
    assert!((400..600).contains(&in_a), "{in_a}");
}

#[test]
fn rewind_respects_cutoff() {
    let mut t = expert("e", "s", "go", 20);
    t.cutoff = Some(0.5);
    let cfg = SamplerConfig::default();
    let mut rng = rng_for(&[3]);
    for _ in 0..200 {
        let ex = rewind_augment(&t, &mut rng, &cfg).unwrap();
        let rejected = if ex.pref_target == Slot::A { &ex.indices_b } else { &ex.indices_a };
        let full = apply_cutoff(&t, 0.9).unwrap();
        let p: Vec<f64> = rejected.iter().map(|&i| full.progress[i]).collect();
        assert!(p.windows(2).any(|w| w[1] < w[0]), "{rejected:?}");
    }
}

#[test]
fn different_task_pref_matches_instruction() {
    let ds = mixed_dataset();
    let s = PairSampler::new(&ds, SamplerConfig::default()).unwrap();
    let mut rng = rng_for(&[5]);
    let mut saw_mismatch_a = false;
    for _ in 0..500 {
        let ex = s.different_task_pair(&mut rng).unwrap();
        let ta = ds.get(&ex.ids[0]).unwrap();
        let tb = ds.get(&ex.ids[1]).unwrap();
        assert_ne!(ta.instruction, tb.instruction);
        assert_eq!(ta.quality, Quality::Expert);
        assert_eq!(tb.quality, Quality::Expert);
        let winner = if ex.pref_target == Slot::A { ta } else { tb };
        assert_eq!(winner.instruction, ex.instruction);
        if ta.instruction != ex.instruction {
            saw_mismatch_a = true;
            assert_eq!(ex.pref_target, Slot::B);
            assert!(ex.targets_a.progress.iter().all(|&p| p == 0.0));
            assert!(ex.targets_a.progress_mask.iter().all(|&m| m));
        } else {
            assert_eq!(ex.targets_a, apply_cutoff(ta, 0.9).unwrap().select(&ex.indices_a));
        }
    }
    assert!(saw_mismatch_a);
}

#[test]
fn different_task_same_source_rate() {
    let ds = mixed_dataset();
    let same_fraction = |rho: f64, draws: usize| {
        let cfg = SamplerConfig {
            rho_same: rho,
            ..Default::default()
        };
        let s = PairSampler::new(&ds, cfg).unwrap();
        let mut rng = rng_for(&[77]);
        let same = (0..draws)
            .filter(|_| {
                let ex = s.different_task_pair(&mut rng).unwrap();
                ds.get(&ex.ids[0]).unwrap().source == ds.get(&ex.ids[1]).unwrap().source
            })
            .count();
        same as f64 / draws as f64
    };
    assert_eq!(same_fraction(1.0, 500), 1.0);
    let f = same_fraction(0.5, 10_000);
    assert!((0.47..=0.53).contains(&f), "{f}");
}

#[test]
fn different_task_needs_two_instructions() {
    let ds = Dataset::new(vec![expert("a", "s", "go", 10), expert("b", "s", "go", 10)]);
    let s = PairSampler::new(&ds, SamplerConfig::default()).unwrap();
    assert!(matches!(s.different_task_pair(&mut rng_for(&[0])), Err(Error::Ineligible(_))));
}

#[test]
fn expertise_expert_beats_fail() {
    let ds = Dataset::new(vec![expert("e", "s", "go", 10), traj("f", "s", "go", Quality::Fail, None, 10)]);
    let s = PairSampler::new(&ds, SamplerConfig::default()).unwrap();
    let mut rng = rng_for(&[1]);
    let mut saw_b = false;
    for _ in 0..50 {
        let ex = s.expertise_pair(&mut rng).unwrap();
        assert_eq!(ex.strategy, Strategy::Expertise);
        let winner = if ex.pref_target == Slot::A { &ex.ids[0] } else { &ex.ids[1] };
        assert_eq!(winner, "e");
        if ex.pref_target == Slot::B {
            saw_b = true;
            assert!(ex.targets_a.progress_mask.iter().all(|&m| !m));
        }
        assert_eq!(*ex.indices_a.last().unwrap(), 9);
    }
    assert!(saw_b);
}

#[test]
fn expertise_uses_final_progress_labels() {
    let hi = traj("hi", "s", "go", Quality::Suboptimal, Some(0.8), 10);
    let lo = traj("lo", "s", "go", Quality::Suboptimal, Some(0.3), 10);
    let ds = Dataset::new(vec![lo, hi]);
    let s = PairSampler::new(&ds, SamplerConfig::default()).unwrap();
    let mut rng = rng_for(&[4]);
    for _ in 0..50 {
        let ex = s.expertise_pair(&mut rng).unwrap();
        let winner = if ex.pref_target == Slot::A { &ex.ids[0] } else { &ex.ids[1] };
        assert_eq!(winner, "hi");
        if ex.ids[0] == "hi" {
            let m = &ex.targets_a.progress_mask;
            assert!(m[..7].iter().all(|&x| !x) && m[7]);
            assert_eq!(ex.targets_a.progress[7], 0.8);
        }
    }
}

#[test]
fn unlabeled_pairs_are_never_emitted() {
    let ds = Dataset::new(vec![
        traj("u1", "s", "go", Quality::Unlabeled, None, 10),
        traj("u2", "s", "go", Quality::Unlabeled, None, 10),
        traj("f", "s", "go", Quality::Fail, None, 10),
    ]);
    let s = PairSampler::new(&ds, SamplerConfig::default()).unwrap();
    assert!(matches!(s.expertise_pair(&mut rng_for(&[0])), Err(Error::Ineligible(_))));
}

#[test]
fn strategy_weights_select_strategy() {
    let ds = mixed_dataset();
    let cfg = SamplerConfig {
        strategy_weights: StrategyWeights::only(Strategy::Rewind),
        ..Default::default()
    };
    for step in 0..100 {
        assert_eq!(sample_example(&ds, step, &cfg).unwrap().strategy, Strategy::Rewind);
    }
}

#[test]
fn sample_is_pure_in_seed_and_step() {
    let ds = mixed_dataset();
    let cfg = SamplerConfig {
        seed: 7,
        ..Default::default()
    };
    let s = PairSampler::new(&ds, cfg.clone()).unwrap();
    let first = s.sample(42).unwrap();
    let _ = s.sample(3).unwrap();
    assert_eq!(s.sample(42).unwrap(), first);
    assert_eq!(sample_example(&ds, 42, &cfg).unwrap(), first);
}

#[test]
fn equal_weights_give_balanced_strategies() {
    let ds = mixed_dataset();
    let s = PairSampler::new(&ds, SamplerConfig::default()).unwrap();
    let mut counts = [0usize; 3];
    for step in 0..3000 {
        let ex = s.sample(step).unwrap();
        counts[Strategy::ALL.iter().position(|&x| x == ex.strategy).unwrap()] += 1;
        assert_eq!(ex.frames_a.len(), 8);
        assert_eq!(ex.frames_b.len(), 8);
        assert_eq!(ex.targets_a.len(), 8);
    }
    for c in counts {
        let f = c as f64 / 3000.0;
        assert!((0.28..=0.39).contains(&f), "{counts:?}");
    }
}

#[test]
fn ineligible_strategies_are_resampled() {
    // Only experts of a single instruction: expertise and different-task are
    // both impossible, rewind always works.
    let ds = Dataset::new(vec![expert("a", "s", "go", 12), expert("b", "s", "go", 14)]);
    let s = PairSampler::new(&ds, SamplerConfig::default()).unwrap();
    for step in 0..50 {
        assert_eq!(s.sample(step).unwrap().strategy, Strategy::Rewind);
    }
    let cfg = SamplerConfig {
        strategy_weights: StrategyWeights::only(Strategy::Expertise),
        ..Default::default()
    };
    assert!(matches!(sample_example(&ds, 0, &cfg), Err(Error::Ineligible(_))));
}

#[test]
fn config_validation() {
    let mut cfg = SamplerConfig {
        strategy_weights: StrategyWeights {
            expertise: 0.0,
            different_task: 0.0,
            rewind: 0.0,
        },
        ..Default::default()
    };
    assert!(cfg.validate().is_err());
    cfg.strategy_weights = StrategyWeights::default();
    cfg.t_model = 4;
    assert!(cfg.validate().is_err());
}
