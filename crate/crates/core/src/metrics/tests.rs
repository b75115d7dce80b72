use super::*;
use crate::rng::rng_for;
use crate::scoring::{OracleModel, Trace};
use crate::synthworld::{gen_dataset, DatasetConfig};
use proptest::prelude::*;
use rand::Rng as _;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn pearson_examples() {
    assert!(close(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap(), 1.0, 1e-15));
    assert_eq!(pearson(&[1.0, 2.0, 3.0], &[5.0; 3]).unwrap(), 0.0);
    let r = pearson(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.2, 0.3, 0.2, 0.1, 0.05]).unwrap();
    assert_eq!(format!("{r:.2}"), "-0.81");
    assert!(pearson(&[1.0], &[1.0]).is_err());
    assert!(pearson(&[1.0, 2.0], &[1.0]).is_err());
}

#[test]
fn voc_examples() {
    assert!(close(voc(&[1.0, 2.0, 3.0]).unwrap(), 1.0, 1e-15));
    assert!(close(voc(&[3.0, 2.0, 1.0]).unwrap(), -1.0, 1e-15));
    assert!(voc(&[1.0]).is_err());
}

#[test]
fn kendall_examples() {
    assert_eq!(kendall_tau_a(&[0.1, 0.5, 0.9], &[0, 1, 2]).unwrap(), 1.0);
    assert_eq!(kendall_tau_a(&[0.9, 0.5, 0.1], &[0, 1, 2]).unwrap(), -1.0);
    assert!(close(kendall_tau_a(&[0.5, 0.5, 0.9], &[0, 1, 2]).unwrap(), 2.0 / 3.0, 1e-15));
    assert!(kendall_tau_a(&[0.5], &[0]).is_err());
}

#[test]
fn gap_examples() {
    let m = HashMap::from([(Quality::Expert, vec![0.9]), (Quality::Fail, vec![0.3])]);
    assert!(close(succ_fail_gap(&m).unwrap(), 0.6, 1e-15));
    let m = HashMap::from([(Quality::Expert, vec![0.4, 0.6]), (Quality::Fail, vec![0.4, 0.6])]);
    assert_eq!(succ_fail_gap(&m).unwrap(), 0.0);
    let m = HashMap::from([(Quality::Expert, vec![0.4])]);
    assert!(succ_fail_gap(&m).is_err());
}

#[test]
fn confusion_examples() {
    let id = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
    assert_eq!(confusion_diag_mean(&id).unwrap(), 1.0);
    let u = vec![vec![0.3; 4]; 4];
    assert!(close(confusion_diag_mean(&u).unwrap(), 0.25, 1e-15));
    let r = vec![vec![0.8, 0.2], vec![0.2, 0.8]];
    assert!(close(confusion_diag_mean(&r).unwrap(), 0.8, 1e-15));
    assert!(confusion_diag_mean(&[vec![1.0, 0.0], vec![0.0, 0.0]]).is_err());
    assert!(confusion_diag_mean(&[vec![1.0]]).is_err());
}

#[test]
fn binned_mae_examples() {
    assert_eq!(binned_mae(&[1.0], &[5]).unwrap(), 0.0);
    assert_eq!(binned_mae(&[0.0], &[5]).unwrap(), 4.0);
    assert!(binned_mae(&[0.5], &[6]).is_err());
    assert!(binned_mae(&[0.5], &[0]).is_err());
}

struct Fixed(f64);

impl RewardModel for Fixed {
    fn trace(&self, _: &str, clip: &ClipRef<'_>) -> Result<Trace> {
        Ok(Trace {
            progress: vec![self.0; clip.len()],
            success: vec![0.0; clip.len()],
        })
    }
    fn prefer(&self, _: &str, _: &ClipRef<'_>, _: &ClipRef<'_>) -> Result<f64> {
        Ok(self.0)
    }
}

/// Prefers whichever clip is longer, ties broken by a hash of the ids.
struct Coin;

impl RewardModel for Coin {
    fn trace(&self, _: &str, clip: &ClipRef<'_>) -> Result<Trace> {
        Fixed(0.0).trace("", clip)
    }
    fn prefer(&self, _: &str, a: &ClipRef<'_>, b: &ClipRef<'_>) -> Result<f64> {
        let h = crate::rng::derive(&[a.indices[0] as u64, b.indices[0] as u64, a.indices.len() as u64]);
        Ok(if h & 1 == 0 { 0.9 } else { 0.1 })
    }
}

#[test]
fn pref_accuracy_audits_both_slots() {
    let sd = gen_dataset(&DatasetConfig {
        n_tasks: 2,
        trajs_per_task: 2,
        ..Default::default()
    })
    .unwrap();
    let (a, b) = (&sd.dataset.trajectories[0], &sd.dataset.trajectories[1]);
    let oracle = OracleModel::from_synth(&sd);
    let pair = |w| LabeledPair {
        instruction: a.instruction.clone(),
        a: ClipRef::full(a),
        b: ClipRef::full(b),
        winner: w,
    };
    // Oracle: first trajectory is the expert of its task.
    assert_eq!(pref_accuracy(&oracle, &[pair(Slot::A)]).unwrap(), 1.0);
    assert_eq!(pref_accuracy(&oracle, &[pair(Slot::B)]).unwrap(), 0.0);
    // A constant "always A" predictor is right exactly once per pair.
    assert_eq!(pref_accuracy(&Fixed(0.9), &[pair(Slot::A)]).unwrap(), 0.5);

    let mut rng = rng_for(&[77]);
    let t = &sd.dataset.trajectories[0];
    let pairs: Vec<LabeledPair<'_>> = (0..10_000)
        .map(|k| {
            let s = k % t.num_frames;
            let e = rng.random_range(s + 1..=t.num_frames);
            LabeledPair {
                instruction: t.instruction.clone(),
                a: ClipRef::range(t, s, e),
                b: ClipRef::range(t, rng.random_range(0..t.num_frames), t.num_frames),
                winner: if rng.random::<bool>() { Slot::A } else { Slot::B },
            }
        })
        .collect();
    let acc = pref_accuracy(&Coin, &pairs).unwrap();
    assert!((acc - 0.5).abs() <= 0.02, "{acc}");
}

#[test]
fn oracle_report_is_ideal() {
    let sd = gen_dataset(&DatasetConfig {
        n_tasks: 6,
        trajs_per_task: 5,
        ..Default::default()
    })
    .unwrap();
    let oracle = OracleModel::from_synth(&sd);
    let mut opts = EvalOptions::default();
    for (i, t) in sd.dataset.trajectories.iter().enumerate() {
        let last = sd.records[i].states.last().unwrap();
        opts.gt_final
            .insert(t.id.clone(), crate::synthworld::oracle_progress(sd.task_of(i), last));
    }
    let r = evaluate(&oracle, &sd.dataset, &opts).unwrap();
    assert!(r.voc_mean.unwrap() > 0.999);
    assert!(r.succ_fail_gap.unwrap() > 0.5);
    assert_eq!(r.pref_accuracy, Some(1.0), "{:?}", r);
    assert_eq!(r.binned_mae, Some(0.0));
    let k = r.per_task.len();
    assert!(k >= 2);
    assert_eq!(r.confusion_diag_mean, Some(1.0));
    let json = serde_json::to_string(&r).unwrap();
    assert_eq!(serde_json::from_str::<MetricReport>(&json).unwrap(), r);
}

#[test]
fn build_confusion_rejects_single_task() {
    let sd = gen_dataset(&DatasetConfig {
        n_tasks: 1,
        trajs_per_task: 1,
        mode_mix: [("expert".to_string(), 1.0)].into(),
        ..Default::default()
    })
    .unwrap();
    let t = &sd.dataset.trajectories[0];
    let oracle = OracleModel::from_synth(&sd);
    assert!(build_confusion(&oracle, &[(ClipRef::full(t), t.instruction.clone())]).is_err());
}

fn brute_kendall(s: &[f64], g: &[i64]) -> f64 {
    let n = s.len();
    let (mut c, mut d) = (0i64, 0i64);
    for i in 0..n {
        for j in 0..n {
            if i < j {
                let ds = s[i] - s[j];
                let dg = (g[i] - g[j]) as f64;
                if ds * dg > 0.0 {
                    c += 1;
                } else if ds * dg < 0.0 {
                    d += 1;
                }
            }
        }
    }
    (c - d) as f64 / (n * (n - 1) / 2) as f64
}

proptest! {
    #[test]
    fn kendall_matches_enumeration(v in proptest::collection::vec((0u8..5, 0i64..4), 2..=8)) {
        let s: Vec<f64> = v.iter().map(|p| p.0 as f64 / 4.0).collect();
        let g: Vec<i64> = v.iter().map(|p| p.1).collect();
        prop_assert_eq!(kendall_tau_a(&s, &g).unwrap(), brute_kendall(&s, &g));
    }

    #[test]
    fn voc_affine_invariant(r in proptest::collection::vec(-1.0f64..1.0, 2..30), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let v = voc(&r).unwrap();
        let w = voc(&r.iter().map(|x| a * x + b).collect::<Vec<_>>()).unwrap();
        prop_assert!((v - w).abs() < 1e-9 || (v.abs() < 1e-9 && w.abs() < 1e-9));
    }

    #[test]
    fn confusion_in_unit_interval(k in 2usize..6, seed in any::<u64>()) {
        let mut rng = rng_for(&[seed]);
        let r: Vec<Vec<f64>> = (0..k).map(|_| (0..k).map(|_| rng.random_range(0.01..1.0)).collect()).collect();
        let c = confusion_diag_mean(&r).unwrap();
        prop_assert!(c > 0.0 && c < 1.0);
    }
}
