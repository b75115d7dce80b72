use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use trajreward::annotate::AnnotationLog;
use trajreward::experiments::{run_ablation, AblationConfig};
use trajreward::failuredetect::{detect, evaluate_detector, DetectorConfig, LabeledTrace, Verdict};
use trajreward::iql::{
    evaluate_policy, gen_offline_data, iql_grad_check, iql_train, iql_train_validated, relabel, EnvConfig, IqlConfig,
    Relabel, ToyEnv, Validation,
};
use trajreward::metrics::{build_confusion, confusion_diag_mean, evaluate, EvalOptions, RankScore};
use trajreward::pairsampler::PairSampler;
use trajreward::retrieval::{rank_by_voc, rank_by_winmatrix, segment, to_records, SegmentConfig, Subtrajectory};
use trajreward::rewardnet::{grad_check, LossWeights};
use trajreward::synthworld::{gen_dataset, gen_play_set, gen_task, load_synth, oracle_progress, write_dataset, DatasetConfig};
use trajreward::trainer::{init_checkpoint, train_until, TrainOutput, CHECKPOINT_FILE, METRICS_FILE};
use trajreward::trajdata::load_manifest;
use trajreward::{
    Checkpoint, ClipRef, Dataset, ModelConfig, NetModel, OracleModel, Quality, RewardModel, RewardNet, SamplerConfig,
    TrainConfig,
};

#[derive(Debug, Parser)]
#[command(name = "trajreward", version, about = "Trajectory reward models on a synthetic manipulation world")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Seed; overrides the seed in the config file
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config file for the command
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args)]
struct ModelSrc {
    /// Score with a trained checkpoint
    #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Score with the analytic progress oracle (synthetic datasets only)
    #[arg(long)]
    oracle: bool,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate a synthetic trajectory dataset
    SynthGen {
        #[command(flatten)]
        common: Common,
    },
    /// Train a reward model
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Continue from the checkpoint in --out if one exists
        #[arg(long)]
        resume: bool,
        /// Stop after this many steps (still bounded by the configured total)
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// Metric report over a dataset
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        model: ModelSrc,
    },
    /// Instruction/trajectory confusion matrix
    Confusion {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        model: ModelSrc,
    },
    /// Flag failed trajectories from progress traces
    DetectFailures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        model: ModelSrc,
    },
    /// Rank play-data segments for a query task
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelSrc,
    },
    /// Offline RL with relabelled rewards
    Iql {
        #[command(flatten)]
        common: Common,
        /// Reward model checkpoint for the `model` relabel mode
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Serve the annotation API
    AnnotateServe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Annotation log (default: <out>/annotations.jsonl)
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Finite-difference gradient checks
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Progress-only / +preference / +failed-data ablation
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn git_hash() -> String {
    std::process::Command::new("git")
        .args(["-C", env!("CARGO_MANIFEST_DIR"), "rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// Creates `out` and records what produced it.
fn start_run(common: &Common, command: &str, seed: Option<u64>, config: &impl Serialize) -> Result<()> {
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    write_json(
        &common.out.join("run.json"),
        &json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "git": git_hash(),
            "seed": seed,
            "config": config,
        }),
    )
}

fn load_model(src: &ModelSrc, data: Option<&Path>) -> Result<Box<dyn RewardModel>> {
    if let Some(ck) = &src.checkpoint {
        let ckpt = Checkpoint::load(ck)?;
        return Ok(Box::new(NetModel::from_checkpoint(&ckpt)));
    }
    let Some(dir) = data else {
        bail!("--oracle needs a synthetic dataset");
    };
    let sd = load_synth(dir).context("--oracle needs a dataset written by synth-gen")?;
    Ok(Box::new(OracleModel::from_synth(&sd)))
}

/// Oracle final progress for every trajectory of a synthetic dataset, or
/// nothing for other datasets.
fn oracle_finals(dir: &Path) -> std::collections::HashMap<String, f64> {
    let Ok(sd) = load_synth(dir) else {
        return Default::default();
    };
    sd.dataset
        .trajectories
        .iter()
        .zip(&sd.records)
        .map(|(t, r)| {
            let task = &sd.tasks[r.task_index];
            (t.id.clone(), r.states.last().map_or(0.0, |s| oracle_progress(task, s)))
        })
        .collect()
}

fn synth_gen(common: &Common) -> Result<Value> {
    let mut cfg: DatasetConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if common.out.join(trajreward::trajdata::MANIFEST_FILE).exists() {
        bail!("{} already holds a dataset", common.out.display());
    }
    start_run(common, "synth-gen", Some(cfg.seed), &cfg)?;
    let sd = gen_dataset(&cfg)?;
    write_dataset(&sd, &common.out)?;
    Ok(json!({"trajectories": sd.dataset.len(), "tasks": sd.tasks.len(), "out": common.out}))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainRun {
    model: Option<ModelConfig>,
    sampler: SamplerConfig,
    train: TrainConfig,
}

fn train_cmd(common: &Common, data: &Path, resume: bool, stop_at: Option<usize>) -> Result<Value> {
    let mut cfg: TrainRun = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.sampler.seed = s;
    }
    let model = cfg.model.clone().unwrap_or_else(ModelConfig::toy);
    let ds = load_manifest(data)?;
    let ckpt_path = common.out.join(CHECKPOINT_FILE);
    let ckpt = if resume && ckpt_path.exists() {
        let c = Checkpoint::load(&ckpt_path)?;
        log::info!("resuming from step {}", c.step);
        c
    } else {
        if ckpt_path.exists() || common.out.join(METRICS_FILE).exists() {
            bail!("{} already holds a run; pass --resume to continue it", common.out.display());
        }
        start_run(
            common,
            "train",
            Some(cfg.train.seed),
            &TrainRun {
                model: Some(model.clone()),
                ..cfg.clone()
            },
        )?;
        init_checkpoint(model, cfg.sampler.clone(), cfg.train.clone())?
    };
    let stop = stop_at.unwrap_or(ckpt.train.steps);
    let ckpt = train_until(&ds, ckpt, stop, &TrainOutput::to_dir(&common.out))?;
    Ok(json!({"step": ckpt.step, "checkpoint": ckpt_path}))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalRun {
    rank_score: RankScore,
}

fn eval_cmd(common: &Common, data: &Path, src: &ModelSrc) -> Result<Value> {
    let cfg: EvalRun = load_config(common.config.as_deref())?;
    start_run(common, "eval", common.seed, &cfg)?;
    let ds = load_manifest(data)?;
    let model = load_model(src, Some(data))?;
    let opts = EvalOptions {
        rank_score: cfg.rank_score,
        gt_final: oracle_finals(data),
    };
    let report = evaluate(model.as_ref(), &ds, &opts)?;
    write_json(&common.out.join("metrics.json"), &report)?;
    Ok(json!({
        "voc_mean": report.voc_mean,
        "kendall_tau_a": report.kendall_tau_a,
        "succ_fail_gap": report.succ_fail_gap,
        "confusion_diag_mean": report.confusion_diag_mean,
        "pref_accuracy": report.pref_accuracy,
        "binned_mae": report.binned_mae,
    }))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfusionRun {
    /// Use at most this many distinct instructions.
    k: Option<usize>,
}

fn confusion_cmd(common: &Common, data: &Path, src: &ModelSrc) -> Result<Value> {
    let cfg: ConfusionRun = load_config(common.config.as_deref())?;
    start_run(common, "confusion", common.seed, &cfg)?;
    let ds = load_manifest(data)?;
    let model = load_model(src, Some(data))?;
    let mut picked: Vec<(ClipRef<'_>, String)> = Vec::new();
    for t in &ds.trajectories {
        if cfg.k.is_some_and(|k| picked.len() >= k) {
            break;
        }
        if t.quality == Quality::Expert && picked.iter().all(|(_, s)| *s != t.instruction) {
            picked.push((ClipRef::full(t), t.instruction.clone()));
        }
    }
    if picked.len() < 2 {
        bail!("need experts for at least two distinct instructions, found {}", picked.len());
    }
    let matrix = build_confusion(model.as_ref(), &picked)?;
    let diag = confusion_diag_mean(&matrix)?;
    let instructions: Vec<&str> = picked.iter().map(|(_, s)| s.as_str()).collect();
    let trajectories: Vec<&str> = picked.iter().map(|(c, _)| c.traj.id.as_str()).collect();
    write_json(
        &common.out.join("confusion.json"),
        &json!({"instructions": instructions, "trajectories": trajectories, "matrix": matrix, "diag_mean": diag}),
    )?;
    Ok(json!({"k": picked.len(), "diag_mean": diag, "chance": 1.0 / picked.len() as f64}))
}

fn detect_cmd(common: &Common, data: &Path, src: &ModelSrc) -> Result<Value> {
    let cfg: DetectorConfig = load_config(common.config.as_deref())?;
    cfg.validate()?;
    start_run(common, "detect-failures", common.seed, &cfg)?;
    let ds = load_manifest(data)?;
    let model = load_model(src, Some(data))?;
    let mut rows = String::new();
    let mut labeled = Vec::new();
    for t in &ds.trajectories {
        let tr = model.trace(&t.instruction, &ClipRef::full(t))?;
        if tr.progress.len() < cfg.window {
            log::warn!("{}: {} frames, shorter than the window; skipped", t.id, tr.progress.len());
            continue;
        }
        let d = detect(&tr.progress, tr.final_success(), &cfg)?;
        rows.push_str(&serde_json::to_string(&json!({
            "id": t.id,
            "quality": t.quality,
            "label": d.label,
            "flag_index": d.flag_index,
        }))?);
        rows.push('\n');
        if t.quality != Quality::Unlabeled {
            labeled.push(LabeledTrace {
                success_prob: tr.final_success(),
                progress: tr.progress,
                truth: if t.quality == Quality::Expert {
                    Verdict::Success
                } else {
                    Verdict::Failure
                },
            });
        }
    }
    fs::write(common.out.join("detections.jsonl"), rows)?;
    let score = evaluate_detector(&cfg, &labeled).ok();
    write_json(&common.out.join("score.json"), &score)?;
    Ok(json!({"trajectories": labeled.len(), "score": score}))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RetrieveRun {
    n_tasks: usize,
    per_task: usize,
    /// First task seed of the play set.
    task_offset: u64,
    seed: u64,
    /// Index of the query task within the play set.
    query_task: usize,
    k: usize,
    method: Method,
    /// Ordered preference evaluations for the win-matrix ranker; all pairs when absent.
    pair_budget: Option<usize>,
    segment: SegmentConfig,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Method {
    Voc,
    WinMatrix,
}

impl Default for RetrieveRun {
    fn default() -> Self {
        RetrieveRun {
            n_tasks: 5,
            per_task: 4,
            task_offset: 0,
            seed: 0,
            query_task: 0,
            k: 5,
            method: Method::Voc,
            pair_budget: None,
            segment: SegmentConfig::default(),
        }
    }
}

fn retrieve_cmd(common: &Common, src: &ModelSrc) -> Result<Value> {
    let mut cfg: RetrieveRun = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if cfg.query_task >= cfg.n_tasks {
        bail!("query_task {} out of range for {} tasks", cfg.query_task, cfg.n_tasks);
    }
    start_run(common, "retrieve", Some(cfg.seed), &cfg)?;
    let tasks: Vec<_> = (0..cfg.n_tasks as u64).map(|j| gen_task(cfg.task_offset + j)).collect();
    let play = gen_play_set(&tasks, cfg.per_task, cfg.seed)?;
    let model: Box<dyn RewardModel> = match &src.checkpoint {
        Some(ck) => Box::new(NetModel::from_checkpoint(&Checkpoint::load(ck)?)),
        None => Box::new(OracleModel::from_play(&play)),
    };
    let segs: Vec<Subtrajectory<'_>> = play.iter().flat_map(|p| segment(p, &cfg.segment)).collect();
    let query = &tasks[cfg.query_task].instruction;
    let k = cfg.k.min(segs.len());
    let ranked = match cfg.method {
        Method::Voc => rank_by_voc(&segs, query, model.as_ref(), k)?,
        Method::WinMatrix => {
            let budget = cfg.pair_budget.unwrap_or(segs.len() * segs.len());
            rank_by_winmatrix(&segs, query, model.as_ref(), budget, k, cfg.seed)?
        }
    };
    let hits = ranked.iter().filter(|r| r.seg.traj.instruction == *query).count();
    let records = to_records(&ranked);
    write_json(&common.out.join("ranking.json"), &json!({"query": query, "ranking": records}))?;
    Ok(json!({"query": query, "segments": segs.len(), "k": k, "query_task_hits": hits}))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct IqlRun {
    env: EnvConfig,
    iql: IqlConfig,
    n_expert: usize,
    n_noisy: usize,
    noise_scale: f64,
    /// Any of `sparse`, `oracle`, `model`.
    modes: Vec<String>,
    gammas: Vec<f64>,
    seeds: Vec<u64>,
    eval_episodes: usize,
    /// Validate every this many steps and keep the best snapshot; 0 disables.
    validate_every: usize,
    val_episodes: usize,
}

impl Default for IqlRun {
    fn default() -> Self {
        IqlRun {
            env: EnvConfig::default(),
            iql: IqlConfig::default(),
            n_expert: 10,
            n_noisy: 90,
            noise_scale: 1.0,
            modes: vec!["sparse".into(), "oracle".into()],
            gammas: vec![0.9, 0.95, 0.99],
            seeds: vec![0, 1, 2],
            eval_episodes: 100,
            validate_every: 0,
            val_episodes: 30,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct IqlRow {
    mode: String,
    gamma: f64,
    seed: u64,
    success_rate: f64,
}

fn iql_cmd(common: &Common, checkpoint: Option<&Path>) -> Result<Value> {
    let mut cfg: IqlRun = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    let net = match checkpoint {
        Some(p) => Some(NetModel::from_checkpoint(&Checkpoint::load(p)?)),
        None => None,
    };
    for m in &cfg.modes {
        match m.as_str() {
            "sparse" | "oracle" => {}
            "model" if net.is_some() => {}
            "model" => bail!("relabel mode `model` needs --checkpoint"),
            other => bail!("unknown relabel mode {other:?}"),
        }
    }
    start_run(common, "iql", cfg.seeds.first().copied(), &cfg)?;
    let env = ToyEnv::new(cfg.env.clone());
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let data = gen_offline_data(&env, cfg.n_expert, cfg.n_noisy, cfg.noise_scale, seed)?;
        for m in &cfg.modes {
            let mode = match m.as_str() {
                "sparse" => Relabel::Sparse,
                "oracle" => Relabel::Oracle,
                _ => Relabel::Model(net.as_ref().expect("checked above")),
            };
            let transitions = relabel(&env, &data, &mode)?;
            for &gamma in &cfg.gammas {
                let icfg = IqlConfig {
                    gamma,
                    seed,
                    ..cfg.iql.clone()
                };
                let out = if cfg.validate_every > 0 {
                    let val = Validation {
                        env: &env,
                        every: cfg.validate_every,
                        episodes: cfg.val_episodes,
                        seed: 50_000 + seed,
                    };
                    iql_train_validated(&transitions, &icfg, &val)?
                } else {
                    iql_train(&transitions, &icfg)?
                };
                let sr = evaluate_policy(&env, &out.policy, cfg.eval_episodes, 10_000 + seed);
                log::info!("{m} gamma {gamma} seed {seed}: success {sr:.3}");
                rows.push(IqlRow {
                    mode: m.clone(),
                    gamma,
                    seed,
                    success_rate: sr,
                });
            }
        }
    }
    let mut csv = String::from("mode,gamma,seed,success_rate\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.mode, r.gamma, r.seed, r.success_rate));
    }
    fs::write(common.out.join("results.csv"), csv)?;
    write_json(&common.out.join("results.json"), &rows)?;
    Ok(json!({"runs": rows.len(), "results": rows}))
}

fn annotate_serve(common: &Common, data: &Path, host: &str, port: u16, annotations: Option<&Path>) -> Result<Value> {
    let log_path = annotations
        .map(Path::to_path_buf)
        .unwrap_or_else(|| common.out.join(trajreward_annotator::ANNOTATIONS_FILE));
    start_run(
        common,
        "annotate-serve",
        common.seed,
        &json!({"data": data, "host": host, "port": port, "annotations": log_path}),
    )?;
    // fail fast on an unwritable log before binding
    drop(AnnotationLog::open(&log_path)?);
    let state = trajreward_annotator::AppState::open(data, &log_path)?;
    let addr: std::net::SocketAddr = format!("{host}:{port}").parse().context("bad --host/--port")?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(trajreward_annotator::serve(state, addr))?;
    Ok(json!({"stopped": true}))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GradCheckRun {
    eps: f64,
    examples: u64,
    seed: u64,
}

impl Default for GradCheckRun {
    fn default() -> Self {
        GradCheckRun {
            eps: 1e-3,
            examples: 3,
            seed: 0,
        }
    }
}

fn grad_check_cmd(common: &Common) -> Result<Value> {
    let mut cfg: GradCheckRun = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    start_run(common, "grad-check", Some(cfg.seed), &cfg)?;
    let ds: Dataset = gen_dataset(&DatasetConfig {
        n_tasks: 4,
        trajs_per_task: 3,
        t_range: [10, 14],
        seed: cfg.seed,
        ..Default::default()
    })?
    .dataset;
    let sampler = PairSampler::new(
        &ds,
        SamplerConfig {
            seed: cfg.seed,
            ..Default::default()
        },
    )?;
    let net = RewardNet::new(ModelConfig::tiny(), cfg.seed)?;
    let mut worst = 0.0f64;
    for i in 0..cfg.examples {
        let ex = sampler.sample(i)?;
        let r = grad_check(&net, &ex, cfg.eps, LossWeights::default(), cfg.seed + i)?;
        worst = worst.max(r.max_rel_err);
    }
    let iql = iql_grad_check(cfg.seed);
    let report = json!({
        "composite_max_rel_err": worst,
        "iql_q_max_rel_err": iql.q,
        "iql_v_max_rel_err": iql.v,
        "iql_pi_max_rel_err": iql.pi,
        "pass": worst < 1e-3 && iql.q < 1e-3 && iql.v < 1e-3 && iql.pi < 1e-3,
    });
    write_json(&common.out.join("grad_check.json"), &report)?;
    Ok(report)
}

fn ablate_cmd(common: &Common) -> Result<Value> {
    let mut cfg: AblationConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    start_run(common, "ablate", cfg.seeds.first().copied(), &cfg)?;
    let report = run_ablation(&cfg)?;
    write_json(&common.out.join("ablation.json"), &report)?;
    Ok(serde_json::to_value(&report.summary)?)
}

fn run(cli: Cli) -> Result<Value> {
    match &cli.cmd {
        Cmd::SynthGen { common } => synth_gen(common),
        Cmd::Train {
            common,
            data,
            resume,
            stop_at,
        } => train_cmd(common, data, *resume, *stop_at),
        Cmd::Eval { common, data, model } => eval_cmd(common, data, model),
        Cmd::Confusion { common, data, model } => confusion_cmd(common, data, model),
        Cmd::DetectFailures { common, data, model } => detect_cmd(common, data, model),
        Cmd::Retrieve { common, model } => retrieve_cmd(common, model),
        Cmd::Iql { common, checkpoint } => iql_cmd(common, checkpoint.as_deref()),
        Cmd::AnnotateServe {
            common,
            data,
            host,
            port,
            annotations,
        } => annotate_serve(common, data, host, *port, annotations.as_deref()),
        Cmd::GradCheck { common } => grad_check_cmd(common),
        Cmd::Ablate { common } => ablate_cmd(common),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
