//! End-to-end acceptance checks. Each test prints one `[PASS]`/`[FAIL]` line
//! before asserting, so `cargo test --test acceptance -- --nocapture`
//! yields a readable summary.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng as _;
use trajreward::annotate::{compute_cutoff, percentile_cutoff, Annotation};
use trajreward::experiments::{run_ablation, AblationConfig, AblationReport, Variant};
use trajreward::failuredetect::{evaluate_detector, sliding_corr, LabeledTrace, Verdict};
use trajreward::iql::{evaluate_policy, gen_offline_data, iql_grad_check, iql_train, relabel, EnvConfig, IqlConfig, Relabel, ToyEnv};
use trajreward::metrics::{evaluate, kendall_tau_a, pearson, EvalOptions};
use trajreward::retrieval::{rank_by_voc, rank_by_winmatrix, segment, SegmentConfig, Subtrajectory};
use trajreward::rewardnet::{expected_progress, grad_check, project_to_bins, LossWeights};
use trajreward::rng::rng_for;
use trajreward::scoring::Trace;
use trajreward::synthworld::{gen_dataset, gen_play_set, gen_task, write_dataset, DatasetConfig};
use trajreward::trainer::{init_checkpoint, train, train_until, TrainOutput};
use trajreward::{
    Checkpoint, ClipRef, Dataset, Frame, ModelConfig, NetModel, OracleModel, PairSampler, RewardModel, RewardNet,
    SamplerConfig, TrainConfig, Trajectory,
};

fn report(name: &str, pass: bool, detail: String) -> bool {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn small_dataset(seed: u64) -> Dataset {
    gen_dataset(&DatasetConfig {
        n_tasks: 6,
        trajs_per_task: 4,
        t_range: [10, 14],
        seed,
        ..Default::default()
    })
    .unwrap()
    .dataset
}

fn scramble(frame: &mut Frame, seed: u64) {
    let mut rng = rng_for(&[0xCA5A, seed]);
    for v in frame.data.iter_mut() {
        *v = rng.random::<f32>();
    }
}

#[test]
fn causality() {
    let start = Instant::now();
    let ds = small_dataset(11);
    let sampler = PairSampler::new(&ds, SamplerConfig::default()).unwrap();
    let (mut checked, mut violations) = (0usize, 0usize);
    for m in 0..10u64 {
        let cfg = if m % 2 == 0 { ModelConfig::toy() } else { ModelConfig::tiny() };
        let net = RewardNet::new(cfg, 100 + m).unwrap();
        for e in 0..10u64 {
            let ex = sampler.sample(m * 1000 + e).unwrap();
            let base = net.forward(&net.tokenize(&ex.instruction, &ex.frames_a, &ex.frames_b).unwrap(), None).unwrap();
            let t = (m + e) as usize % ex.frames_a.len();
            let mut a = ex.frames_a.clone();
            for (j, f) in a.iter_mut().enumerate().skip(t + 1) {
                scramble(f, m * 100 + e * 10 + j as u64);
            }
            let mut b = ex.frames_b.clone();
            for (j, f) in b.iter_mut().enumerate() {
                scramble(f, 7 + m * 100 + e * 10 + j as u64);
            }
            let out = net.forward(&net.tokenize(&ex.instruction, &a, &b).unwrap(), None).unwrap();
            let same = (0..=t).all(|i| {
                out.success_logits[i].to_bits() == base.success_logits[i].to_bits()
                    && out.progress_dists[i]
                        .iter()
                        .zip(&base.progress_dists[i])
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            });
            checked += 1;
            violations += usize::from(!same);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = checked == 100 && violations == 0 && secs < 60.0;
    assert!(report(
        "causality",
        pass,
        format!("{checked} pairs, {violations} violations, {secs:.1}s")
    ));
}

#[test]
fn loss_and_gradients() {
    let start = Instant::now();
    let ds = small_dataset(12);
    let sampler = PairSampler::new(&ds, SamplerConfig::default()).unwrap();
    let net = RewardNet::new(ModelConfig::tiny(), 5).unwrap();
    let mut composite = 0.0f64;
    for i in 0..5u64 {
        let ex = sampler.sample(i).unwrap();
        composite = composite.max(grad_check(&net, &ex, 1e-3, LossWeights::default(), i).unwrap().max_rel_err);
    }
    let iql = iql_grad_check(5);
    let mut round_trip = 0.0f64;
    for n_bins in [2, 11, ModelConfig::toy().n_bins, 101] {
        for i in 0..=1000 {
            let p = i as f64 / 1000.0;
            let e = expected_progress(&project_to_bins(p, n_bins).unwrap()).unwrap();
            round_trip = round_trip.max((e - p).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = composite < 1e-3 && iql.q < 1e-3 && iql.v < 1e-3 && iql.pi < 1e-3 && round_trip < 1e-10 && secs < 120.0;
    assert!(report(
        "loss/gradient",
        pass,
        format!(
            "composite {composite:.2e}, iql q {:.2e} v {:.2e} pi {:.2e}, round-trip {round_trip:.1e}, {secs:.1}s",
            iql.q, iql.v, iql.pi
        )
    ));
}

fn brute_tau(s: &[f64], r: &[i64]) -> f64 {
    let n = s.len();
    let mut net = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let a = s[i].partial_cmp(&s[j]).unwrap();
            let b = r[i].cmp(&r[j]);
            if a != Ordering::Equal && b != Ordering::Equal {
                net += if a == b { 1 } else { -1 };
            }
        }
    }
    net as f64 / (n * (n - 1) / 2) as f64
}

fn two_pass_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[test]
fn metric_oracle_equivalence() {
    let mut rng = rng_for(&[0x7A0]);
    let mut tau_mismatch = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=8);
        // small value ranges so ties are common on both sides
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64 * 0.25).collect();
        let r: Vec<i64> = (0..n).map(|_| rng.random_range(0..3)).collect();
        if kendall_tau_a(&s, &r).unwrap() != brute_tau(&s, &r) {
            tau_mismatch += 1;
        }
    }
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(3..=50);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.3 * v + rng.random_range(-5.0..5.0)).collect();
        worst = worst.max((pearson(&x, &y).unwrap() - two_pass_pearson(&x, &y)).abs());
    }
    let pass = tau_mismatch == 0 && worst <= 1e-12;
    assert!(report(
        "metric oracle equivalence",
        pass,
        format!("kendall mismatches {tau_mismatch}/1000, pearson max diff {worst:.1e}")
    ));
}

fn ablation() -> &'static (AblationReport, Duration) {
    static CELL: OnceLock<(AblationReport, Duration)> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let r = run_ablation(&AblationConfig::default()).unwrap();
        (r, start.elapsed())
    })
}

#[test]
fn ablation_direction() {
    let (r, took) = ablation();
    let [a, b, c] = Variant::ALL.map(|v| r.mean(v).unwrap().clone());
    let order = a.kendall_tau_a < b.kendall_tau_a && b.kendall_tau_a < c.kendall_tau_a;
    let gap = a.succ_fail_gap < c.succ_fail_gap;
    let targets = c.kendall_tau_a >= 0.8 && c.succ_fail_gap >= 0.3;
    let fast = took.as_secs_f64() <= 2.0 * 3600.0;
    assert!(report(
        "ablation direction",
        order && gap && targets && fast,
        format!(
            "tau_a {:.3} < {:.3} < {:.3}, gap {:.3} < {:.3}, {:.0}s",
            a.kendall_tau_a,
            b.kendall_tau_a,
            c.kendall_tau_a,
            a.succ_fail_gap,
            c.succ_fail_gap,
            took.as_secs_f64()
        )
    ));
}

#[test]
fn confusion_separability() {
    let (r, _) = ablation();
    let k = AblationConfig::default().confusion_k;
    assert_eq!(k, 10);
    let c = r.mean(Variant::FailedData).unwrap();
    let chance = 1.0 / k as f64;
    assert!(report(
        "confusion separability",
        c.confusion_diag_mean >= 3.0 * chance,
        format!("diag mean {:.3} vs 3x chance {:.3}", c.confusion_diag_mean, 3.0 * chance)
    ));
}

#[test]
fn failure_detection() {
    let cfg = AblationConfig::default();
    assert_eq!((cfg.detector.window, cfg.detector.threshold), (5, -0.5));
    let set = cfg.detection_set().unwrap();
    assert_eq!(set.dataset.len(), 200);
    let oracle = OracleModel::from_synth(&set);
    let traces: Vec<LabeledTrace> = trajreward::experiments::labeled_traces(&oracle, &set.dataset).unwrap();
    let oracle_f1 = evaluate_detector(&cfg.detector, &traces).unwrap().f1;
    let corr = sliding_corr(&[0.1, 0.2, 0.3, 0.2, 0.1, 0.05], 5).unwrap()[1];
    let window_ok = format!("{corr:.2}") == "-0.81";
    let (r, _) = ablation();
    let model_f1 = r.mean(Variant::FailedData).unwrap().detect_f1;
    assert!(traces.iter().any(|t| t.truth == Verdict::Failure));
    assert!(report(
        "failure detection",
        oracle_f1 >= 0.9 && model_f1 >= 0.7 && window_ok,
        format!("oracle F1 {oracle_f1:.3}, model F1 {model_f1:.3}, window corr {corr:.4}")
    ));
}

/// The stronger parent always wins; traces rise with strength.
struct Tournament(Vec<(&'static str, i32)>);

impl Tournament {
    fn of(&self, c: &ClipRef<'_>) -> i32 {
        self.0.iter().find(|s| s.0 == c.traj.id).map_or(0, |s| s.1)
    }
}

impl RewardModel for Tournament {
    fn trace(&self, _: &str, clip: &ClipRef<'_>) -> trajreward::Result<Trace> {
        let s = self.of(clip) as f64;
        Ok(Trace {
            progress: (0..clip.len()).map(|i| s * i as f64).collect(),
            success: vec![0.0; clip.len()],
        })
    }
    fn prefer(&self, _: &str, a: &ClipRef<'_>, b: &ClipRef<'_>) -> trajreward::Result<f64> {
        Ok(match self.of(a).cmp(&self.of(b)) {
            Ordering::Greater => 0.9,
            Ordering::Less => 0.1,
            Ordering::Equal => 0.5,
        })
    }
}

/// Every comparison ties; traces differ only in slope.
struct Flat;

impl RewardModel for Flat {
    fn trace(&self, _: &str, clip: &ClipRef<'_>) -> trajreward::Result<Trace> {
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
    fn prefer(&self, _: &str, _: &ClipRef<'_>, _: &ClipRef<'_>) -> trajreward::Result<f64> {
        Ok(0.5)
    }
}

#[test]
fn retrieval() {
    let tasks: Vec<_> = (200..205).map(gen_task).collect();
    let play = gen_play_set(&tasks, 4, 21).unwrap();
    let oracle = OracleModel::from_play(&play);
    let segs: Vec<Subtrajectory<'_>> = play.iter().flat_map(|p| segment(p, &SegmentConfig::default())).collect();
    let (mut hits, mut total) = (0, 0);
    for task in &tasks {
        let own = segs.iter().filter(|s| s.traj.instruction == task.instruction).count();
        let k = own.min(5);
        let top = rank_by_voc(&segs, &task.instruction, &oracle, k).unwrap();
        hits += top.iter().filter(|r| r.seg.traj.instruction == task.instruction).count();
        total += k;
    }
    let voc_frac = hits as f64 / total as f64;

    let sub: Vec<Subtrajectory<'_>> = segs.iter().take(8).cloned().collect();
    let n = sub.len();
    let q = &tasks[0].instruction;
    let w1 = rank_by_winmatrix(&sub, q, &oracle, n * n, n, 0).unwrap();
    let w2 = rank_by_winmatrix(&sub, q, &oracle, n * n, n, 99).unwrap();
    let deterministic = w1 == w2;

    let trajs: Vec<Trajectory> = (0..3)
        .map(|i| {
            let mut t = play[i].rollout.trajectory.clone();
            t.id = format!("seg{i}");
            t
        })
        .collect();
    let three: Vec<Subtrajectory<'_>> = trajs.iter().map(|t| Subtrajectory { traj: t, start: 0, end: 6 }).collect();
    let ids = |m: &dyn RewardModel| -> Vec<String> {
        rank_by_winmatrix(&three, "x", m, 9, 3, 0)
            .unwrap()
            .iter()
            .map(|r| r.seg.parent_id().to_string())
            .collect()
    };
    let winner = ids(&Tournament(vec![("seg0", 1), ("seg1", 3), ("seg2", 2)])) == ["seg1", "seg2", "seg0"];
    let ties = ids(&Flat) == ["seg1", "seg2", "seg0"];
    assert!(report(
        "retrieval",
        voc_frac >= 0.9 && deterministic && winner && ties,
        format!("voc top-k hit rate {voc_frac:.3}, win-matrix deterministic {deterministic}, copeland cases {winner}/{ties}")
    ));
}

/// Offline-RL comparison at the CLI defaults.
#[test]
fn iql_direction() {
    let start = Instant::now();
    let env = ToyEnv::new(EnvConfig::default());
    let gammas = [0.9, 0.95, 0.99];
    let (mut dense, mut sparse) = (0.0, [0.0; 3]);
    for seed in 0..3u64 {
        let data = gen_offline_data(&env, 10, 90, 1.0, seed).unwrap();
        let eval = |mode: &Relabel<'_>, gamma: f64| {
            let tr = relabel(&env, &data, mode).unwrap();
            let out = iql_train(&tr, &IqlConfig { gamma, seed, ..Default::default() }).unwrap();
            evaluate_policy(&env, &out.policy, 200, 10_000 + seed) / 3.0
        };
        dense += eval(&Relabel::Oracle, 0.9);
        for (i, &g) in gammas.iter().enumerate() {
            sparse[i] += eval(&Relabel::Sparse, g);
        }
    }
    let best = sparse.iter().cloned().fold(f64::MIN, f64::max);
    let secs = start.elapsed().as_secs_f64();
    assert!(report(
        "iql direction",
        dense >= best && secs <= 1800.0,
        format!("dense@0.9 {dense:.3} vs sparse {sparse:.3?} (best {best:.3}), {secs:.0}s")
    ));
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let synth_cfg = DatasetConfig {
        n_tasks: 6,
        trajs_per_task: 4,
        t_range: [10, 14],
        seed: 8,
        ..Default::default()
    };
    let (d1, d2) = (tmp.path().join("d1"), tmp.path().join("d2"));
    write_dataset(&gen_dataset(&synth_cfg).unwrap(), &d1).unwrap();
    write_dataset(&gen_dataset(&synth_cfg).unwrap(), &d2).unwrap();
    let synth_same = dir_bytes(&d1) == dir_bytes(&d2);

    let ds = gen_dataset(&synth_cfg).unwrap().dataset;
    let model = ModelConfig::tiny();
    let sampler = SamplerConfig {
        seed: 4,
        ..Default::default()
    };
    let tc = TrainConfig {
        steps: 6,
        batch_size: 2,
        eval_every: 2,
        seed: 4,
        ..Default::default()
    };
    let (full, split) = (tmp.path().join("full"), tmp.path().join("split"));
    let straight = train(&ds, model.clone(), sampler.clone(), tc.clone(), &TrainOutput::to_dir(&full)).unwrap();
    let first = train_until(
        &ds,
        init_checkpoint(model, sampler, tc).unwrap(),
        3,
        &TrainOutput::to_dir(&split),
    )
    .unwrap();
    let reloaded = Checkpoint::from_bytes(&first.to_bytes().unwrap()).unwrap();
    let resumed = train_until(&ds, reloaded, 6, &TrainOutput::to_dir(&split)).unwrap();
    let train_same = straight.to_bytes().unwrap() == resumed.to_bytes().unwrap() && dir_bytes(&full) == dir_bytes(&split);

    let report_bytes = |ck: &Checkpoint| {
        serde_json::to_vec(&evaluate(&NetModel::from_checkpoint(ck), &ds, &EvalOptions::default()).unwrap()).unwrap()
    };
    let eval_same = report_bytes(&straight) == report_bytes(&resumed);
    assert!(report(
        "determinism",
        synth_same && train_same && eval_same,
        format!("synth-gen {synth_same}, train resume {train_same}, eval {eval_same}")
    ));
}

#[test]
fn cutoff_percentile() {
    let ten: Vec<f64> = (1..=10).map(|k| k as f64 / 10.0).collect();
    let p90 = percentile_cutoff(&ten, 10).unwrap();

    // appended annotations with fraction at or above the current cutoff never lower it
    let ds = small_dataset(13);
    let source = ds.trajectories[0].source.clone();
    let pool: Vec<&Trajectory> = ds.trajectories.iter().filter(|t| t.source == source).collect();
    let mut rng = rng_for(&[0xC0F]);
    let mut violations = 0;
    for seq in 0..100u64 {
        let mut anns: Vec<Annotation> = Vec::new();
        let mut prev: Option<f64> = None;
        for step in 0..30 {
            let t = pool[rng.random_range(0..pool.len())];
            let end_frame = rng.random_range(0..t.num_frames);
            let frac = (end_frame + 1) as f64 / t.num_frames as f64;
            if prev.is_some_and(|c| frac < c) {
                continue;
            }
            anns.push(Annotation {
                traj_id: t.id.clone(),
                end_frame,
                annotator: format!("s{seq}"),
                timestamp: step,
            });
            if let Ok(c) = compute_cutoff(&ds, &source, &anns, 10) {
                if prev.is_some_and(|p| c < p) {
                    violations += 1;
                }
                prev = Some(c);
            }
        }
    }
    assert!(report(
        "compute_cutoff",
        p90 == 0.9 && violations == 0,
        format!("P90 of 0.1..1.0 = {p90}, monotonicity violations {violations}/100 sequences")
    ));
}
