//! Command-line surface for the MiRA pipeline: `train`, `rollout`,
//! `analyze`, `eval`, and `report`.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 numerical abort.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use mira::analysis::{
    classify_failure, divergence_step, failure_distribution, summarize, AnalyzerParams,
    FailureRecord, ReferenceTraceSet,
};
use mira::config::RunConfig;
use mira::env::{build_instance, Instance, PageId};
use mira::metrics::{
    auroc, calibration_curve, equivalence_metrics_from_labels, kendall_tau, pass_at_k,
    progress_score, roc_points, CalibrationBin, MetricError, PrfMetrics,
};
use mira::models::{Checkpoint, FeatureExtractor, ModelSet};
use mira::train::{outer_loop, rollout, TrainError};
use mira::trajectory::{append_log, read_log, Trajectory};

#[derive(Parser)]
#[command(name = "mira", version, about = "Milestone-guided reward shaping pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the outer curriculum loop and write per-phase artifacts.
    Train(TrainArgs),
    /// Roll out a checkpointed policy and record trajectories.
    Rollout(RolloutArgs),
    /// Classify failures in a trajectory log.
    Analyze(AnalyzeArgs),
    /// Compute evaluation metrics over a trajectory log.
    Eval(EvalArgs),
    /// Aggregate the phase summaries of a finished run.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Path to the run config TOML.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides [run].run_dir).
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation: disable the learned potential critic.
    #[arg(long)]
    no_potential_critic: bool,
    /// Ablation: use the importance-weighted KL actor objective.
    #[arg(long)]
    kl_actor: bool,
    /// Override the TD/MC mixing weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Override the shaping coefficient.
    #[arg(long)]
    alpha: Option<f64>,
    /// Override the phase count.
    #[arg(long)]
    phases: Option<usize>,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Episodes per task.
    #[arg(long, default_value_t = 8)]
    n: usize,
    /// Temperature-0 (greedy) action selection.
    #[arg(long)]
    greedy: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output trajectory JSONL.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Trajectory JSONL to analyze.
    #[arg(long)]
    log: PathBuf,
    /// Optional reference success-trace JSONL.
    #[arg(long)]
    refs: Option<PathBuf>,
    /// Optional JSON map of task_id to goal page id (enables the
    /// reached-goal-page rule).
    #[arg(long)]
    goals: Option<PathBuf>,
    /// Per-trace records JSONL output.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Aggregate report JSON output.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Aggregate report CSV output.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    log: PathBuf,
    /// Metrics JSON output (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for plot-data CSVs (ROC points, calibration bins).
    #[arg(long)]
    csv_dir: Option<PathBuf>,
    /// pass@k values to report.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 4, 8])]
    k: Vec<usize>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run_dir: PathBuf,
    /// Aggregate JSON output (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-phase CSV output.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let numeric = err
                .chain()
                .any(|e| matches!(e.downcast_ref(), Some(TrainError::NumericAbort { .. })));
            ExitCode::from(if numeric { 3 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Rollout(args) => cmd_rollout(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn build_pool(config: &RunConfig) -> Result<Vec<Instance>> {
    (0..config.run.pool_size as u64)
        .map(|seed| build_instance(&config.env, seed).context("generating task pool"))
        .collect()
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.hparams.seed = seed;
    }
    if args.no_potential_critic {
        config.hparams.use_potential_critic = false;
    }
    if args.kl_actor {
        config.hparams.kl_actor = true;
    }
    if let Some(lambda) = args.lambda {
        config.hparams.lambda = lambda;
    }
    if let Some(alpha) = args.alpha {
        config.hparams.alpha = alpha;
    }
    if let Some(phases) = args.phases {
        config.hparams.phases = phases;
    }
    config.validate()?;
    let run_dir = args
        .run_dir
        .or_else(|| config.run.run_dir.clone())
        .context("no run directory: pass --run-dir or set [run].run_dir")?;
    config.run.run_dir = Some(run_dir.clone());
    config.freeze(&run_dir)?;
    let pool = build_pool(&config)?;
    let result = outer_loop(&config.env, &pool, &config.hparams, Some(&run_dir))?;
    let last = result.summaries.last().expect("at least one phase");
    println!(
        "completed {} phase(s); final success rate {:.3}; artifacts in {}",
        result.summaries.len(),
        last.success_rate,
        run_dir.display()
    );
    Ok(())
}

fn episode_seed(seed: u64, task_id: &str, index: usize) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in format!("{seed}|{task_id}|{index}").as_bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn cmd_rollout(args: RolloutArgs) -> Result<()> {
    let config = RunConfig::load(&args.config)?;
    let extractor = FeatureExtractor::from_config(&config.env, config.hparams.digest_window);
    let checkpoint = Checkpoint::load(&args.checkpoint, None)?;
    let mut models: ModelSet = checkpoint.models;
    if models.policy.n_features != extractor.dim()
        || models.policy.n_actions != extractor.action_space.len()
    {
        bail!(
            "checkpoint dimensions ({} features, {} actions) do not match the environment ({}, {})",
            models.policy.n_features,
            models.policy.n_actions,
            extractor.dim(),
            extractor.action_space.len()
        );
    }
    models.policy.temperature = if args.greedy {
        0.0
    } else {
        config.hparams.temperature
    };
    if args.out.exists() {
        std::fs::remove_file(&args.out)?;
    }
    let pool = build_pool(&config)?;
    let mut written = 0;
    for instance in &pool {
        for j in 0..args.n {
            let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(
                args.seed,
                &instance.task.task_id,
                j,
            ));
            let traj = rollout(
                instance,
                &models,
                &extractor,
                &config.hparams,
                0,
                &mut rng,
            )?;
            append_log(&traj, &args.out)?;
            written += 1;
        }
    }
    println!("wrote {written} trajectories to {}", args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct AnalyzeReport {
    total_traces: usize,
    successes: usize,
    failures: usize,
    distribution: BTreeMap<String, DistributionRow>,
}

#[derive(Serialize)]
struct DistributionRow {
    count: usize,
    ratio: f64,
}

fn load_goal_map(path: Option<&Path>) -> Result<BTreeMap<String, u32>> {
    match path {
        None => Ok(BTreeMap::new()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            Ok(serde_json::from_str(&text).context("parsing goal-page map")?)
        }
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let traces = read_log(&args.log)?;
    let goals = load_goal_map(args.goals.as_deref())?;
    let mut refs_by_task: BTreeMap<String, Vec<Trajectory>> = BTreeMap::new();
    if let Some(refs_path) = &args.refs {
        for reference in read_log(refs_path)? {
            refs_by_task
                .entry(reference.task_id.clone())
                .or_default()
                .push(reference);
        }
    }
    let params = AnalyzerParams::default();
    let mut records: Vec<FailureRecord> = Vec::new();
    let mut summaries: Vec<String> = Vec::new();
    for traj in &traces {
        if traj.is_success() {
            continue;
        }
        let goal = goals.get(&traj.task_id).map(|&p| PageId(p));
        let mut record = classify_failure(traj, goal, &params)?;
        let ref_set = ReferenceTraceSet::new(
            refs_by_task.get(&traj.task_id).cloned().unwrap_or_default(),
        )?;
        record.decision_step = divergence_step(traj, &ref_set, record.decision_step);
        summaries.push(summarize(traj, Some(&record)));
        records.push(record);
    }
    if let Some(out) = &args.records {
        let mut lines = String::new();
        for record in &records {
            lines.push_str(&serde_json::to_string(record)?);
            lines.push('\n');
        }
        std::fs::write(out, lines)?;
    }
    let dist = failure_distribution(&records, traces.len());
    let report = AnalyzeReport {
        total_traces: traces.len(),
        successes: traces.iter().filter(|t| t.is_success()).count(),
        failures: records.len(),
        distribution: dist
            .iter()
            .map(|(cat, share)| {
                (
                    cat.label().to_string(),
                    DistributionRow {
                        count: share.count,
                        ratio: share.ratio,
                    },
                )
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&report)?;
    match &args.report {
        Some(path) => std::fs::write(path, &json)?,
        None => println!("{json}"),
    }
    if let Some(csv) = &args.csv {
        let mut text = String::from("category,count,ratio\n");
        for (label, row) in &report.distribution {
            text.push_str(&format!("{label},{},{}\n", row.count, row.ratio));
        }
        std::fs::write(csv, text)?;
    }
    for summary in &summaries {
        eprintln!("{summary}\n");
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    tasks: usize,
    traces: usize,
    pass_at_k: BTreeMap<usize, f64>,
    auroc: Option<f64>,
    kendall_tau: Option<f64>,
    equivalence: Option<PrfMetrics>,
    calibration: BTreeMap<usize, CalibrationBin>,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let traces = read_log(&args.log)?;
    if traces.is_empty() {
        bail!("trajectory log {} is empty", args.log.display());
    }
    let mut per_task: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for traj in &traces {
        let entry = per_task.entry(traj.task_id.clone()).or_insert((0, 0));
        entry.0 += 1;
        entry.1 += traj.success as usize;
    }

    let mut pass_map = BTreeMap::new();
    for &k in &args.k {
        let eligible: Vec<f64> = per_task
            .values()
            .filter(|(n, _)| *n >= k)
            .map(|&(n, c)| pass_at_k(n, c, k).expect("valid pass@k args"))
            .collect();
        if eligible.is_empty() {
            eprintln!("warning: no task has {k} samples; pass@{k} omitted");
            continue;
        }
        pass_map.insert(k, eligible.iter().sum::<f64>() / eligible.len() as f64);
    }

    let big_k = traces.iter().map(|t| t.final_z().len()).max().unwrap_or(0);
    let scored: Vec<(f64, usize, bool)> = traces
        .iter()
        .map(|t| {
            let z = t.final_z();
            let m = z.iter().filter(|&&b| b != 0).count();
            (progress_score(&z), m, t.is_success())
        })
        .collect();

    let auroc_samples: Vec<(f64, bool)> = scored.iter().map(|&(s, _, y)| (s, y)).collect();
    let auroc_value = match auroc(&auroc_samples) {
        Ok(v) => Some(v),
        Err(MetricError::SingleClass) => {
            eprintln!("warning: single-class outcomes; AUROC omitted");
            None
        }
        Err(e) => return Err(e.into()),
    };
    let ms: Vec<f64> = scored.iter().map(|&(_, m, _)| m as f64).collect();
    let ys: Vec<f64> = scored
        .iter()
        .map(|&(_, _, y)| if y { 1.0 } else { 0.0 })
        .collect();
    let tau = match kendall_tau(&ms, &ys) {
        Ok(v) => Some(v),
        Err(MetricError::ZeroVariance) | Err(MetricError::InvalidArgs(_)) => {
            eprintln!("warning: Kendall tau undefined on this log; omitted");
            None
        }
        Err(e) => return Err(e.into()),
    };
    let predicted: Vec<bool> = scored.iter().map(|&(_, m, _)| m == big_k).collect();
    let gold: Vec<bool> = scored.iter().map(|&(_, _, y)| y).collect();
    let equivalence = match equivalence_metrics_from_labels(&predicted, &gold) {
        Ok(v) => Some(v),
        Err(MetricError::NoPredictedPositives) => {
            eprintln!("warning: no all-complete traces; equivalence metrics omitted");
            None
        }
        Err(e) => return Err(e.into()),
    };
    let calib_samples: Vec<(usize, f64)> = scored
        .iter()
        .map(|&(_, m, y)| (m, if y { 1.0 } else { 0.0 }))
        .collect();
    let calibration = calibration_curve(&calib_samples, big_k)?;

    let report = EvalReport {
        tasks: per_task.len(),
        traces: traces.len(),
        pass_at_k: pass_map,
        auroc: auroc_value,
        kendall_tau: tau,
        equivalence,
        calibration: calibration.clone(),
    };
    let json = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => std::fs::write(path, &json)?,
        None => println!("{json}"),
    }
    if let Some(dir) = &args.csv_dir {
        std::fs::create_dir_all(dir)?;
        let mut calib_csv = String::from("m,count,success_rate\n");
        for (m, bin) in &calibration {
            calib_csv.push_str(&format!("{m},{},{}\n", bin.count, bin.success_rate));
        }
        std::fs::write(dir.join("calibration.csv"), calib_csv)?;
        if auroc_value.is_some() {
            let mut roc_csv = String::from("threshold,tpr,fpr\n");
            for p in roc_points(&auroc_samples)? {
                roc_csv.push_str(&format!("{},{},{}\n", p.threshold, p.tpr, p.fpr));
            }
            std::fs::write(dir.join("roc.csv"), roc_csv)?;
        }
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let mut phases: Vec<serde_json::Value> = Vec::new();
    for phase in 0.. {
        let path = args.run_dir.join(format!("summary_{phase}.json"));
        if !path.exists() {
            break;
        }
        let text = std::fs::read_to_string(&path)?;
        phases.push(serde_json::from_str(&text)?);
    }
    if phases.is_empty() {
        bail!("no phase summaries found in {}", args.run_dir.display());
    }
    let aggregate = serde_json::json!({
        "phases": phases,
        "phase_count": phases.len(),
        "final_success_rate": phases.last().and_then(|p| p.get("success_rate")).cloned(),
    });
    let json = serde_json::to_string_pretty(&aggregate)?;
    match &args.out {
        Some(path) => std::fs::write(path, &json)?,
        None => println!("{json}"),
    }
    if let Some(csv) = &args.csv {
        let mut text =
            String::from("phase,success_rate,buffer_size,ppl_pass_rate,rollouts\n");
        for p in &phases {
            text.push_str(&format!(
                "{},{},{},{},{}\n",
                p["phase"], p["success_rate"], p["buffer_size"], p["ppl_pass_rate"], p["rollouts"]
            ));
        }
        std::fs::write(csv, text)?;
    }
    Ok(())
}
