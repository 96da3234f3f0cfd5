#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::{json, Value};

use poela_core::behavior::knn_behavior;
use poela_core::data::{split, SplitSpec};
use poela_core::envs::{generate_logged_data, make_env, mc_value, BehaviorSpec, EnvSpec};
use poela_core::harness::{
    delta_sweep, diagnose_masks, prepare_data, reselect, run_experiment, summary, verify_report, ExperimentConfig,
    Report,
};
use poela_core::learners::{validation_estimate, LearnerKind, MaskRule, SelectionMode, DEFAULT_TRUNCATION};
use poela_core::policy::{Policy, PolicyParams};
use poela_core::Dataset;

#[derive(Parser)]
#[command(
    name = "poela",
    version,
    about = "Offline policy learning with eligible-action constraints"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate logged trajectories from an environment.
    GenData {
        /// Environment spec as JSON, or a path to a JSON file.
        #[arg(long)]
        env: String,
        /// Logging policy spec as JSON, or a path to a JSON file.
        #[arg(long, default_value = r#"{"behavior": "uniform"}"#)]
        behavior: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a dataset by trajectory into train, validation and test files.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.6)]
        train: f64,
        #[arg(long, default_value_t = 0.2)]
        val: f64,
        #[arg(long, default_value_t = 0.2)]
        test: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory receiving train.ds.jsonl, val.ds.jsonl and test.ds.jsonl.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run an experiment grid from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run checkpoint selection on a finished run with another ESS threshold.
    Select {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, default_value_t = 200.0)]
        ess_min: f64,
        #[arg(long, value_enum, default_value_t = Mode::BestCheckpoint)]
        mode: Mode,
    },
    /// Evaluate a stored policy checkpoint on a dataset, optionally by rollouts.
    Evaluate {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Environment spec (JSON or path) for Monte Carlo evaluation.
        #[arg(long)]
        env: Option<String>,
        #[arg(long, default_value_t = 1000)]
        rollouts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Truncation level; defaults to the one the policy was trained with.
        #[arg(long = "M")]
        truncation: Option<f64>,
        /// k of the behavior estimate that PO-μ checkpoints were trained with.
        #[arg(long)]
        knn_k: Option<usize>,
        /// Ignore the learner's action constraint.
        #[arg(long)]
        unmasked: bool,
    },
    /// Diagnostics on data, configs or finished runs.
    Diagnose {
        #[arg(long, value_enum)]
        mode: DiagnoseMode,
        /// Experiment config (delta-sweep).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated radii (delta-sweep); `inf` allowed.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.05, 0.1, 0.5, f64::INFINITY])]
        deltas: Vec<f64>,
        /// Dataset (masks).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Radius (masks).
        #[arg(long, default_value_t = 0.0)]
        delta: f64,
        /// Behavior threshold b (masks).
        #[arg(long, default_value_t = 0.05)]
        threshold: f64,
        /// Neighbors of the behavior estimate (masks).
        #[arg(long, default_value_t = 100)]
        knn_k: usize,
        /// Finished run directory (low-reward, decompose).
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Recompute every number of a finished run and compare with its report.
    Verify {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    BestCheckpoint,
    Final,
}

#[derive(Clone, Copy, ValueEnum)]
enum DiagnoseMode {
    DeltaSweep,
    Masks,
    LowReward,
    Decompose,
}

/// Bad arguments or inputs, reported with exit code 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(message: impl Into<String>) -> anyhow::Error {
    Usage(message.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match e.downcast_ref::<poela_core::Error>() {
        Some(core) if core.is_validation() => 1,
        // A missing input file is the caller's mistake.
        Some(poela_core::Error::Io { source, .. }) if source.kind() == io::ErrorKind::NotFound => 1,
        _ => 2,
    }
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !out.contains(&text) {
            out.push_str(": ");
            out.push_str(&text);
        }
    }
    out
}

fn emit(text: &str) -> anyhow::Result<()> {
    let mut stdout = io::stdout().lock();
    match writeln!(stdout, "{text}").and_then(|_| stdout.flush()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    emit(&serde_json::to_string_pretty(value)?)
}

/// Parse a JSON spec given inline or as a file path.
fn spec<T: serde::de::DeserializeOwned>(arg: &str, what: &str) -> anyhow::Result<T> {
    let text = if Path::new(arg).is_file() {
        fs::read_to_string(arg).with_context(|| format!("reading {arg}"))?
    } else {
        arg.to_string()
    };
    serde_json::from_str(&text).map_err(|e| usage(format!("invalid {what} spec: {e}")))
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::GenData {
            env,
            behavior,
            n,
            seed,
            out,
        } => {
            let env_spec: EnvSpec = spec(&env, "environment")?;
            let behavior: BehaviorSpec = spec(&behavior, "behavior")?;
            let env = make_env(&env_spec)?;
            let data = generate_logged_data(&env, &behavior, n, seed)?;
            data.save(&out)?;
            info!("wrote {} trajectories to {}", data.len(), out.display());
            print_json(&data.summarize())?;
        }
        Command::Split {
            data,
            train,
            val,
            test,
            seed,
            out_dir,
        } => {
            let dataset = Dataset::load(&data)?;
            let parts = split(&dataset, &SplitSpec::new(train, val, test, seed)?)?;
            fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            parts.train.save(out_dir.join("train.ds.jsonl"))?;
            parts.val.save(out_dir.join("val.ds.jsonl"))?;
            parts.test.save(out_dir.join("test.ds.jsonl"))?;
            print_json(&json!({
                "train": parts.train.len(),
                "val": parts.val.len(),
                "test": parts.test.len(),
            }))?;
        }
        Command::Train { config, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            // Relative data paths in the config are relative to the config file.
            let base = config.parent().unwrap_or(Path::new("."));
            rebase_paths(&mut cfg, base);
            let out = out
                .or_else(|| cfg.output_dir.clone())
                .ok_or_else(|| usage("no output directory: pass --out or set output_dir"))?;
            let report = run_experiment(&cfg, &out)?;
            emit(summary(&report).trim_end())?;
        }
        Command::Select { run_dir, ess_min, mode } => {
            if !(ess_min >= 0.0) {
                return Err(usage("--ess-min must be >= 0"));
            }
            let report = Report::load(run_dir.join("report.json"))?;
            let mode = match mode {
                Mode::BestCheckpoint => SelectionMode::BestCheckpoint,
                Mode::Final => SelectionMode::Final,
            };
            let rows: Vec<Value> = reselect(&report, mode, ess_min)
                .into_iter()
                .map(|(learner, chosen)| match chosen {
                    Some((cell, step, value, ess)) => json!({
                        "learner": learner,
                        "cell": cell,
                        "step": step,
                        "validation_value": value,
                        "validation_ess": ess,
                    }),
                    None => json!({ "learner": learner, "note": "no policy selected" }),
                })
                .collect();
            print_json(&rows)?;
        }
        Command::Evaluate {
            policy,
            data,
            env,
            rollouts,
            seed,
            truncation,
            knn_k,
            unmasked,
        } => evaluate(
            &policy,
            &data,
            env.as_deref(),
            rollouts,
            seed,
            truncation,
            knn_k,
            unmasked,
        )?,
        Command::Diagnose {
            mode,
            config,
            deltas,
            data,
            delta,
            threshold,
            knn_k,
            run_dir,
        } => match mode {
            DiagnoseMode::DeltaSweep => {
                let path = config.ok_or_else(|| usage("delta-sweep needs --config"))?;
                let mut cfg = ExperimentConfig::load(&path)?;
                rebase_paths(&mut cfg, path.parent().unwrap_or(Path::new(".")));
                let prepared = prepare_data(&cfg)?;
                print_json(&delta_sweep(&cfg, &deltas, &prepared)?)?;
            }
            DiagnoseMode::Masks => {
                let path = data.ok_or_else(|| usage("masks needs --data"))?;
                let dataset = Dataset::load(&path)?;
                let behavior = knn_behavior(&dataset, knn_k)?;
                print_json(&diagnose_masks(&dataset, delta, &behavior, threshold)?)?;
            }
            DiagnoseMode::LowReward | DiagnoseMode::Decompose => {
                let dir = run_dir.ok_or_else(|| usage("this mode needs --run-dir"))?;
                let report = Report::load(dir.join("report.json"))?;
                let rows: Vec<Value> = report
                    .learners
                    .iter()
                    .map(|l| match mode {
                        DiagnoseMode::LowReward => json!({
                            "learner": l.learner,
                            "low_reward_mass": l.low_reward_mass,
                        }),
                        _ => json!({
                            "learner": l.learner,
                            "decomposition": l.decomposition,
                        }),
                    })
                    .collect();
                print_json(&rows)?;
            }
        },
        Command::Verify { run_dir } => {
            let outcome = verify_report(&run_dir)?;
            let mut lines: Vec<String> = outcome
                .missing
                .iter()
                .map(|m| format!("missing: {}", m.display()))
                .collect();
            for d in &outcome.discrepancies {
                lines.push(format!(
                    "mismatch: {} stored {} recomputed {}",
                    d.field, d.stored, d.recomputed
                ));
            }
            if outcome.passed() {
                lines.push(format!("PASS ({} values checked)", outcome.checked));
            } else {
                lines.push("FAIL".into());
            }
            emit(&lines.join("\n"))?;
            if !outcome.passed() {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn rebase_paths(cfg: &mut ExperimentConfig, base: &Path) {
    use poela_core::harness::DataSource;
    let fix = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    match &mut cfg.data {
        DataSource::Env { .. } => {}
        DataSource::File { path, .. } => fix(path),
        DataSource::Files { train, val, test } => {
            fix(train);
            fix(val);
            fix(test);
        }
    }
    if let Some(out) = cfg.output_dir.as_mut() {
        fix(out);
    }
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    policy_path: &Path,
    data_path: &Path,
    env: Option<&str>,
    rollouts: usize,
    seed: u64,
    truncation: Option<f64>,
    knn_k: Option<usize>,
    unmasked: bool,
) -> anyhow::Result<()> {
    let file = PolicyParams::load(policy_path)?;
    let dataset = Dataset::load(data_path)?;
    let meta = &file.metadata;
    let truncation = match truncation {
        Some(m) => m,
        None => match meta.get("M") {
            Some(Value::String(s)) if s == "inf" => f64::INFINITY,
            Some(v) => v.as_f64().ok_or_else(|| anyhow!("policy metadata has a malformed M"))?,
            None => DEFAULT_TRUNCATION,
        },
    };
    if !(truncation > 0.0) {
        return Err(usage("truncation must be positive"));
    }
    let learner: Option<LearnerKind> = match meta.get("learner") {
        Some(v) if !unmasked => Some(serde_json::from_value(v.clone()).context("policy metadata learner")?),
        _ => None,
    };
    let rule = match learner {
        None | Some(LearnerKind::PoCrm) => MaskRule::Unconstrained,
        Some(kind) => {
            let rel = meta
                .get("train_data")
                .and_then(Value::as_str)
                .ok_or_else(|| usage("constrained checkpoint lacks train_data metadata; pass --unmasked"))?;
            let train_path = policy_path.parent().unwrap_or(Path::new(".")).join(rel);
            let train = Dataset::load(&train_path)?;
            if let Some(fp) = meta.get("train_fingerprint").and_then(Value::as_str) {
                if fp != train.fingerprint() {
                    bail!("training data {} does not match the checkpoint", train_path.display());
                }
            }
            let behavior: Option<Arc<dyn Policy>> = match (kind, knn_k) {
                (LearnerKind::PoMu { .. }, Some(k)) => Some(Arc::new(knn_behavior(&train, k)?)),
                (LearnerKind::PoMu { .. }, None) => return Err(usage("PO-μ checkpoints need --knn-k")),
                _ => None,
            };
            MaskRule::for_learner(&kind, &train, behavior)?
        }
    };
    let params = file.policy;
    let masks = rule.query_masks(&dataset)?;
    let estimate = validation_estimate(&params, &dataset, masks.as_ref(), truncation)?;
    let mc = match env {
        Some(spec_arg) => {
            let env_spec: EnvSpec = spec(spec_arg, "environment")?;
            let env = make_env(&env_spec)?;
            Some(mc_value(&env, &rule.deploy(params), rollouts, seed)?)
        }
        None => None,
    };
    print_json(&json!({
        "policy": policy_path,
        "data": data_path,
        "M": if truncation.is_infinite() { json!("inf") } else { json!(truncation) },
        "sntis": estimate,
        "note": if estimate.is_none() { Some("no overlap with the data") } else { None },
        "mc": mc,
    }))
}
