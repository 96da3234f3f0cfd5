//! Experiment pipeline: train a grid of learner cells, select one policy per
//! learner on validation SNTIS with an ESS filter, evaluate it on held-out
//! data, and write every artifact needed to recompute the report.
//!
//! Every random draw derives from the master seed `s`:
//!
//! * generated data: `derive_path(s, [0, k])` with `k` = 0, 1, 2 for train,
//!   validation and test;
//! * grid cell `i`: `derive_path(s, [1, i])`;
//! * bootstrap for the `j`-th learner: `derive_path(s, [2, j])`;
//! * Monte Carlo rollouts, shared by all learners: `derive_path(s, [3])`.
//!
//! Output layout:
//!
//! ```text
//! <out>/config.json
//! <out>/data/{train,val,test}.ds.jsonl
//! <out>/runs/<cell-id>/ckpt-<step>.policy
//! <out>/runs/<cell-id>/manifest.json
//! <out>/report.json
//! <out>/summary.txt
//! <out>/timing.json      wall-clock only, excluded from the report
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::behavior::{knn_behavior, overlap_mask, reweight_dataset, BehaviorSource};
use crate::bootstrap::{bca_from_weights, BootstrapConfig, BootstrapResult, DEFAULT_RESAMPLES};
use crate::data::{split, Dataset, SplitSpec};
use crate::envs::{
    generate_logged_data, make_env, mc_value, oracle_context_value, BehaviorSpec, EnvBehavior, EnvSpec, McValue,
};
use crate::error::{Error, Result};
use crate::estimators::{compute_weights, decompose, low_reward_weight_mass, Decomposition, Estimate, EstimatorTag};
use crate::learners::{
    masked_estimate, select, train_with_masks, validation_estimate, Checkpoint, LearnerKind, MaskRule, SelectionMode,
    TrainConfig, DEFAULT_LAMBDAS, DEFAULT_TRUNCATION,
};
use crate::neighborhood::{precompute_masks, to_set, EligibleMask, NeighborIndex};
use crate::policy::{objective_gradient, Architecture, MaskedSteps, Policy, PolicyParams, StepPolicy};
use crate::seed;
use crate::serde_util::maybe_inf;

/// Agreement tolerance of [`verify_report`].
pub const VERIFY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// Generate train, validation and test data from an environment.
    Env {
        env: EnvSpec,
        behavior: BehaviorSpec,
        n_train: usize,
        n_val: usize,
        n_test: usize,
    },
    /// Split one dataset file.
    File { path: PathBuf, split: SplitSpec },
    /// Three pre-split dataset files.
    Files {
        train: PathBuf,
        val: PathBuf,
        test: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub learners: Vec<LearnerKind>,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(rename = "M", default = "default_truncation", with = "maybe_inf")]
    pub truncation: f64,
    pub learning_rates: Vec<f64>,
    pub max_steps: usize,
    pub checkpoint_every: usize,
    #[serde(default = "default_architecture")]
    pub architecture: Architecture,
    #[serde(default = "one")]
    pub restarts: usize,
}

fn default_lambdas() -> Vec<f64> {
    DEFAULT_LAMBDAS.to_vec()
}

fn default_truncation() -> f64 {
    DEFAULT_TRUNCATION
}

fn default_architecture() -> Architecture {
    Architecture::LinearSoftmax
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    #[serde(default = "default_mode")]
    pub mode: SelectionMode,
    #[serde(default = "default_ess")]
    pub ess_threshold: f64,
}

fn default_mode() -> SelectionMode {
    SelectionMode::BestCheckpoint
}

fn default_ess() -> f64 {
    200.0
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            mode: default_mode(),
            ess_threshold: default_ess(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSettings {
    #[serde(default = "default_resamples")]
    pub resamples: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_resamples() -> usize {
    DEFAULT_RESAMPLES
}

fn default_alpha() -> f64 {
    0.05
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvaluationConfig {
    /// On-policy rollouts per selected policy (needs an environment source).
    #[serde(default)]
    pub mc_rollouts: Option<usize>,
    #[serde(default)]
    pub bootstrap: Option<BootstrapSettings>,
    /// Returns at or below this count as low reward.
    #[serde(default)]
    pub low_reward_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub data: DataSource,
    #[serde(default = "logged")]
    pub behavior: BehaviorSource,
    /// Replace logged propensities by the kNN estimate in every split.
    #[serde(default)]
    pub estimated_propensities: bool,
    pub grid: GridSpec,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

fn default_name() -> String {
    "experiment".into()
}

fn logged() -> BehaviorSource {
    BehaviorSource::Logged
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::InvalidInput(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.grid.learners.is_empty() || self.grid.lambdas.is_empty() || self.grid.learning_rates.is_empty() {
            return bad("the grid needs at least one learner, lambda and learning rate");
        }
        if self.grid.restarts == 0 {
            return bad("restarts must be at least 1");
        }
        if !(self.selection.ess_threshold >= 0.0) {
            return bad("ess_threshold must be >= 0");
        }
        let has_env = matches!(self.data, DataSource::Env { .. });
        if self.evaluation.mc_rollouts.is_some() && !has_env {
            return bad("Monte Carlo evaluation needs an environment data source");
        }
        if self.evaluation.mc_rollouts == Some(0) {
            return bad("mc_rollouts must be positive");
        }
        if self.estimated_propensities && !matches!(self.behavior, BehaviorSource::Knn { .. }) {
            return bad("estimated_propensities needs behavior = knn");
        }
        if let DataSource::Env {
            n_train, n_val, n_test, ..
        } = self.data
        {
            if n_train == 0 || n_val == 0 || n_test == 0 {
                return bad("n_train, n_val and n_test must be positive");
            }
        }
        if let DataSource::File { split, .. } = &self.data {
            split.validate()?;
        }
        for cell in expand_grid(&self.grid, self.seed) {
            cell.config.validate()?;
        }
        Ok(())
    }
}

/// One `(learner, lambda, learning rate, restart)` combination.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub id: String,
    pub config: TrainConfig,
}

pub fn expand_grid(grid: &GridSpec, master_seed: u64) -> Vec<Cell> {
    let mut cells = Vec::new();
    for learner in &grid.learners {
        for &lambda in &grid.lambdas {
            for &learning_rate in &grid.learning_rates {
                for _ in 0..grid.restarts {
                    let i = cells.len();
                    cells.push(Cell {
                        id: format!("cell-{i:03}"),
                        config: TrainConfig {
                            learner: *learner,
                            architecture: grid.architecture.clone(),
                            lambda,
                            truncation: grid.truncation,
                            learning_rate,
                            max_steps: grid.max_steps,
                            checkpoint_every: grid.checkpoint_every,
                            seed: seed::derive_path(master_seed, &[1, i as u64]),
                        },
                    });
                }
            }
        }
    }
    cells
}

/// Train, validation and test data plus what was used to produce them.
#[derive(Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub env: Option<Arc<crate::envs::Env>>,
    /// Behavior estimate for the PO-μ rule: kNN if configured, otherwise the
    /// environment's true logging policy when known.
    pub behavior: Option<Arc<dyn Policy>>,
}

pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    let (train, val, test) = match &config.data {
        DataSource::Env {
            env,
            behavior,
            n_train,
            n_val,
            n_test,
        } => {
            let e = make_env(env)?;
            let gen = |k: u64, n: usize| generate_logged_data(&e, behavior, n, seed::derive_path(config.seed, &[0, k]));
            (gen(0, *n_train)?, gen(1, *n_val)?, gen(2, *n_test)?)
        }
        DataSource::File { path, split: spec } => {
            let s = split(&Dataset::load(path)?, spec)?;
            (s.train, s.val, s.test)
        }
        DataSource::Files { train, val, test } => (Dataset::load(train)?, Dataset::load(val)?, Dataset::load(test)?),
    };
    let (train, val, test) = if config.estimated_propensities {
        let BehaviorSource::Knn { k } = config.behavior else {
            unreachable!("validated")
        };
        let mu = knn_behavior(&train, k)?;
        (
            reweight_dataset(&mu, &train)?,
            reweight_dataset(&mu, &val)?,
            reweight_dataset(&mu, &test)?,
        )
    } else {
        (train, val, test)
    };
    with_data(config, train, val, test)
}

/// Attach the environment and behavior estimate to already prepared splits.
pub fn with_data(config: &ExperimentConfig, train: Dataset, val: Dataset, test: Dataset) -> Result<PreparedData> {
    if train.feature_dim() != val.feature_dim()
        || train.feature_dim() != test.feature_dim()
        || train.action_count() != val.action_count()
        || train.action_count() != test.action_count()
    {
        return Err(Error::InvalidInput(
            "train, validation and test data have different shapes".into(),
        ));
    }
    let env = match &config.data {
        DataSource::Env { env, .. } => Some(Arc::new(make_env(env)?)),
        _ => None,
    };
    let behavior: Option<Arc<dyn Policy>> = match (config.behavior, &config.data, &env) {
        (BehaviorSource::Knn { k }, _, _) => Some(Arc::new(knn_behavior(&train, k)?)),
        (BehaviorSource::Logged, DataSource::Env { behavior, .. }, Some(e)) => {
            Some(Arc::new(EnvBehavior::new(e.clone(), behavior.clone())?))
        }
        _ => None,
    };
    Ok(PreparedData {
        train,
        val,
        test,
        env,
        behavior,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetrics {
    pub step: usize,
    pub file: String,
    pub train_objective: f64,
    pub train_value: f64,
    pub train_ess: f64,
    pub validation: Option<Estimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub id: String,
    pub config: TrainConfig,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub checkpoints: Vec<CheckpointMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub cell: String,
    pub step: usize,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerReport {
    pub learner: String,
    pub selected: Option<Selected>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub validation: Option<Estimate>,
    pub train: Option<Estimate>,
    pub test: Option<Estimate>,
    pub bootstrap: Option<BootstrapResult>,
    pub mc: Option<McValue>,
    /// Validation SNTIS minus the Monte Carlo value.
    pub overfitting_gap: Option<f64>,
    /// Share of training weight on returns at or below the threshold.
    pub low_reward_mass: Option<f64>,
    /// Action distribution averaged over the initial contexts (finite envs).
    pub initial_action_probs: Option<Vec<f64>>,
    pub decomposition: Option<Decomposition>,
}

impl LearnerReport {
    fn unselected(learner: &str, note: impl Into<String>) -> Self {
        LearnerReport {
            learner: learner.to_string(),
            selected: None,
            note: Some(note.into()),
            validation: None,
            train: None,
            test: None,
            bootstrap: None,
            mc: None,
            overfitting_gap: None,
            low_reward_mass: None,
            initial_action_probs: None,
            decomposition: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataReport {
    pub train: String,
    pub val: String,
    pub test: String,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub seed: u64,
    pub selection: SelectionConfig,
    #[serde(rename = "M", with = "maybe_inf")]
    pub truncation: f64,
    pub data: DataReport,
    pub cells: Vec<CellReport>,
    pub learners: Vec<LearnerReport>,
}

impl Report {
    pub fn learner(&self, name: &str) -> Option<&LearnerReport> {
        self.learners.iter().find(|l| l.learner == name)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Masks of one learner rule on the three splits.
struct RuleMasks {
    rule: MaskRule,
    train: Option<EligibleMask>,
    val: Option<EligibleMask>,
    test: Option<EligibleMask>,
}

fn build_rules(grid: &GridSpec, data: &PreparedData) -> Vec<(LearnerKind, std::result::Result<RuleMasks, String>)> {
    let mut distinct: Vec<LearnerKind> = Vec::new();
    for l in &grid.learners {
        if !distinct.contains(l) {
            distinct.push(*l);
        }
    }
    // One index serves every radius.
    let index = distinct
        .iter()
        .any(|l| matches!(l, LearnerKind::Poela { .. }))
        .then(|| {
            NeighborIndex::build(&data.train)
                .map(Arc::new)
                .map_err(|e| e.to_string())
        });
    distinct
        .into_iter()
        .map(|learner| {
            let built = (|| {
                let rule = match learner {
                    LearnerKind::Poela { delta } => MaskRule::Eligible {
                        index: index.clone().expect("built above").map_err(Error::InvalidInput)?,
                        delta,
                    },
                    _ => MaskRule::for_learner(&learner, &data.train, data.behavior.clone())?,
                };
                Ok::<_, Error>(RuleMasks {
                    train: rule.training_masks(&data.train)?,
                    val: rule.query_masks(&data.val)?,
                    test: rule.query_masks(&data.test)?,
                    rule,
                })
            })();
            (learner, built.map_err(|e| e.to_string()))
        })
        .collect()
}

fn rule_for<'a>(
    rules: &'a [(LearnerKind, std::result::Result<RuleMasks, String>)],
    learner: &LearnerKind,
) -> &'a std::result::Result<RuleMasks, String> {
    &rules
        .iter()
        .find(|(l, _)| l == learner)
        .expect("rule built for every learner")
        .1
}

type CellRun = std::result::Result<Vec<Checkpoint>, String>;

fn checkpoint_file(cell: &str, step: usize) -> String {
    format!("runs/{cell}/ckpt-{step}.policy")
}

/// Train all cells and assemble the report, optionally writing artifacts.
pub fn execute(config: &ExperimentConfig, data: &PreparedData, out: Option<&Path>) -> Result<Report> {
    config.validate()?;
    let cells = expand_grid(&config.grid, config.seed);
    let rules = build_rules(&config.grid, data);
    let runs: Vec<CellRun> = cells
        .par_iter()
        .map(|cell| {
            let masks = rule_for(&rules, &cell.config.learner).as_ref().map_err(|e| e.clone())?;
            let run = train_with_masks(
                &cell.config,
                &data.train,
                masks.train.as_ref(),
                &data.val,
                masks.val.as_ref(),
            );
            if let Err(e) = &run {
                log::error!("{} failed: {e}", cell.id);
            }
            run.map_err(|e| e.to_string())
        })
        .collect();
    if runs.iter().all(|r| r.is_err()) {
        let first = runs.iter().find_map(|r| r.as_ref().err()).cloned().unwrap_or_default();
        return Err(Error::Training {
            step: 0,
            message: format!("every grid cell failed; first error: {first}"),
        });
    }
    if let Some(out) = out {
        write_runs(out, config, data, &cells, &runs)?;
    }
    assemble(config, data, &rules, &cells, &runs)
}

fn write_runs(
    out: &Path,
    config: &ExperimentConfig,
    data: &PreparedData,
    cells: &[Cell],
    runs: &[CellRun],
) -> Result<()> {
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(&out.join("data"))?;
    let mut stored = config.clone();
    stored.output_dir = None;
    write_text(
        &out.join("config.json"),
        &(serde_json::to_string_pretty(&stored)? + "\n"),
    )?;
    data.train.save(out.join("data/train.ds.jsonl"))?;
    data.val.save(out.join("data/val.ds.jsonl"))?;
    data.test.save(out.join("data/test.ds.jsonl"))?;
    for (cell, run) in cells.iter().zip(runs) {
        let dir = out.join("runs").join(&cell.id);
        mkdir(&dir)?;
        let metrics = match run {
            Ok(cps) => {
                for c in cps {
                    let meta = serde_json::json!({
                        "cell": cell.id,
                        "step": c.step,
                        "learner": cell.config.learner,
                        "M": maybe_inf_value(cell.config.truncation),
                        "train_data": "../../data/train.ds.jsonl",
                        "train_fingerprint": data.train.fingerprint(),
                    });
                    c.params.save(out.join(checkpoint_file(&cell.id, c.step)), meta)?;
                }
                cell_metrics(&cell.id, cps)
            }
            Err(_) => Vec::new(),
        };
        let manifest = serde_json::json!({
            "cell": cell.id,
            "config": cell.config,
            "status": if run.is_ok() { "ok" } else { "failed" },
            "error": run.as_ref().err(),
            "checkpoints": metrics,
        });
        write_text(
            &dir.join("manifest.json"),
            &(serde_json::to_string_pretty(&manifest)? + "\n"),
        )?;
    }
    Ok(())
}

fn maybe_inf_value(v: f64) -> Value {
    if v.is_infinite() {
        Value::String("inf".into())
    } else {
        serde_json::json!(v)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cell_metrics(cell: &str, cps: &[Checkpoint]) -> Vec<CheckpointMetrics> {
    cps.iter()
        .map(|c| CheckpointMetrics {
            step: c.step,
            file: checkpoint_file(cell, c.step),
            train_objective: c.train_objective,
            train_value: c.train_value,
            train_ess: c.train_ess,
            validation: c.validation.clone(),
        })
        .collect()
}

/// Best `(cell index, checkpoint index)` per learner name.
fn select_across(cells: &[Cell], runs: &[CellRun], name: &str, selection: &SelectionConfig) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize, f64, usize)> = None;
    for (ci, (cell, run)) in cells.iter().zip(runs).enumerate() {
        if cell.config.learner.name() != name {
            continue;
        }
        let Ok(cps) = run else { continue };
        let Some(k) = select(cps, selection.mode, selection.ess_threshold) else {
            continue;
        };
        let value = cps[k]
            .validation
            .as_ref()
            .expect("selected checkpoints have an estimate")
            .value;
        let step = cps[k].step;
        let better = match best {
            None => true,
            Some((_, _, bv, bs)) => value > bv || (value == bv && step < bs),
        };
        if better {
            best = Some((ci, k, value, step));
        }
    }
    best.map(|(ci, k, _, _)| (ci, k))
}

fn assemble(
    config: &ExperimentConfig,
    data: &PreparedData,
    rules: &[(LearnerKind, std::result::Result<RuleMasks, String>)],
    cells: &[Cell],
    runs: &[CellRun],
) -> Result<Report> {
    let cell_reports = cells
        .iter()
        .zip(runs)
        .map(|(cell, run)| CellReport {
            id: cell.id.clone(),
            config: cell.config.clone(),
            status: if run.is_ok() { "ok" } else { "failed" }.into(),
            error: run.as_ref().err().cloned(),
            checkpoints: run.as_ref().map(|cps| cell_metrics(&cell.id, cps)).unwrap_or_default(),
        })
        .collect();

    let mut names: Vec<&'static str> = Vec::new();
    for l in &config.grid.learners {
        if !names.contains(&l.name()) {
            names.push(l.name());
        }
    }
    let mut learners = Vec::with_capacity(names.len());
    for (j, name) in names.iter().enumerate() {
        let Some((ci, k)) = select_across(cells, runs, name, &config.selection) else {
            learners.push(LearnerReport::unselected(name, "no policy selected"));
            continue;
        };
        let cell = &cells[ci];
        let ckpt = &runs[ci].as_ref().expect("selected from a successful run")[k];
        let masks = rule_for(rules, &cell.config.learner)
            .as_ref()
            .expect("successful run had a rule");
        learners.push(evaluate_selected(config, data, masks, cell, ckpt, j)?);
    }

    Ok(Report {
        name: config.name.clone(),
        seed: config.seed,
        selection: config.selection,
        truncation: config.grid.truncation,
        data: DataReport {
            train: data.train.fingerprint().to_string(),
            val: data.val.fingerprint().to_string(),
            test: data.test.fingerprint().to_string(),
            n_train: data.train.len(),
            n_val: data.val.len(),
            n_test: data.test.len(),
        },
        cells: cell_reports,
        learners,
    })
}

fn steps<'a>(params: &'a PolicyParams, masks: Option<&'a EligibleMask>) -> Box<dyn StepPolicy + 'a> {
    match masks {
        Some(m) => Box::new(MaskedSteps { base: params, masks: m }),
        None => Box::new(params.clone()),
    }
}

fn evaluate_selected(
    config: &ExperimentConfig,
    data: &PreparedData,
    masks: &RuleMasks,
    cell: &Cell,
    ckpt: &Checkpoint,
    learner_index: usize,
) -> Result<LearnerReport> {
    let m = config.grid.truncation;
    let params = &ckpt.params;
    let mut notes = Vec::new();

    let train = masked_estimate(params, &data.train, masks.train.as_ref(), m)?;
    let train_weights = compute_weights(steps(params, masks.train.as_ref()).as_ref(), &data.train, m)?;
    let low_reward_mass = Some(low_reward_weight_mass(
        &train_weights,
        &data.train,
        config.evaluation.low_reward_threshold,
    )?);

    let test = validation_estimate(params, &data.test, masks.test.as_ref(), m)?;
    if test.is_none() {
        notes.push("no overlap with test data".to_string());
    }
    let bootstrap = match (&config.evaluation.bootstrap, &test) {
        (Some(b), Some(_)) => {
            let weights = compute_weights(steps(params, masks.test.as_ref()).as_ref(), &data.test, m)?;
            let cfg = BootstrapConfig {
                resamples: b.resamples,
                alpha: b.alpha,
                seed: seed::derive_path(config.seed, &[2, learner_index as u64]),
            };
            match bca_from_weights(&data.test.returns(), &weights, EstimatorTag::Sntis, &cfg) {
                Ok(r) => Some(r),
                Err(e) => {
                    notes.push(format!("bootstrap: {e}"));
                    None
                }
            }
        }
        _ => None,
    };

    let deployed = masks.rule.deploy(params.clone());
    let mc = match (&data.env, config.evaluation.mc_rollouts) {
        (Some(env), Some(n)) => Some(mc_value(env, &deployed, n, seed::derive_path(config.seed, &[3]))?),
        _ => None,
    };
    let overfitting_gap = match (&ckpt.validation, &mc) {
        (Some(v), Some(mc)) => Some(v.value - mc.mean),
        _ => None,
    };

    let (initial_action_probs, decomposition) = match data.env.as_deref().filter(|e| e.is_finite()) {
        Some(env) => {
            let dist = env.initial_distribution().expect("finite env");
            let mut probs = vec![0.0; env.action_count()];
            for (p, s) in &dist {
                for (acc, q) in probs.iter_mut().zip(deployed.action_probs(&env.context(s))?) {
                    *acc += p * q;
                }
            }
            let oracle = oracle_context_value(env, &deployed)?;
            let decomposition = match decompose(steps(params, masks.train.as_ref()).as_ref(), &data.train, |x| {
                oracle.lookup(x)
            }) {
                Ok(d) => Some(d),
                Err(Error::NoOverlap) => None,
                Err(e) => return Err(e),
            };
            (Some(probs), decomposition)
        }
        None => (None, None),
    };

    Ok(LearnerReport {
        learner: cell.config.learner.name().to_string(),
        selected: Some(Selected {
            cell: cell.id.clone(),
            step: ckpt.step,
            checkpoint: checkpoint_file(&cell.id, ckpt.step),
        }),
        note: (!notes.is_empty()).then(|| notes.join("; ")),
        validation: ckpt.validation.clone(),
        train: Some(train),
        test,
        bootstrap,
        mc,
        overfitting_gap,
        low_reward_mass,
        initial_action_probs,
        decomposition,
    })
}

/// Run the full pipeline and write all artifacts under `out`.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<Report> {
    let started = Instant::now();
    let data = prepare_data(config)?;
    let report = execute(config, &data, Some(out))?;
    write_text(
        &out.join("report.json"),
        &(serde_json::to_string_pretty(&report)? + "\n"),
    )?;
    write_text(&out.join("summary.txt"), &summary(&report))?;
    let unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let timing = serde_json::json!({
        "finished_unix_seconds": unix,
        "elapsed_seconds": started.elapsed().as_secs_f64(),
    });
    write_text(
        &out.join("timing.json"),
        &(serde_json::to_string_pretty(&timing)? + "\n"),
    )?;
    Ok(report)
}

pub fn summary(report: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "experiment {} (seed {})", report.name, report.seed);
    let _ = writeln!(
        s,
        "data: train {} / val {} / test {} trajectories",
        report.data.n_train, report.data.n_val, report.data.n_test
    );
    let failed = report.cells.iter().filter(|c| c.status != "ok").count();
    let _ = writeln!(s, "cells: {} trained, {failed} failed", report.cells.len());
    let _ = writeln!(
        s,
        "selection: {:?}, ESS >= {}",
        report.selection.mode, report.selection.ess_threshold
    );
    for l in &report.learners {
        let _ = writeln!(s);
        let _ = writeln!(s, "[{}]", l.learner);
        match &l.selected {
            None => {
                let _ = writeln!(s, "  {}", l.note.as_deref().unwrap_or("no policy selected"));
                continue;
            }
            Some(sel) => {
                let _ = writeln!(s, "  selected {} step {}", sel.cell, sel.step);
            }
        }
        let fmt = |e: &Option<Estimate>| match e {
            Some(e) => format!("{:.4} (ESS {:.1})", e.value, e.ess),
            None => "n/a".into(),
        };
        let _ = writeln!(s, "  train SNTIS      {}", fmt(&l.train));
        let _ = writeln!(s, "  validation SNTIS {}", fmt(&l.validation));
        let _ = writeln!(s, "  test SNTIS       {}", fmt(&l.test));
        if let Some(b) = &l.bootstrap {
            let _ = writeln!(
                s,
                "  BCa {:.0}% interval [{:.4}, {:.4}] (B = {})",
                100.0 * (1.0 - b.alpha),
                b.lower,
                b.upper,
                b.resamples
            );
        }
        if let Some(mc) = &l.mc {
            let _ = writeln!(
                s,
                "  Monte Carlo      {:.4} +- {:.4} ({} rollouts)",
                mc.mean, mc.std_error, mc.rollouts
            );
        }
        if let Some(g) = l.overfitting_gap {
            let _ = writeln!(s, "  overfitting gap  {g:.4}");
        }
        if let Some(m) = l.low_reward_mass {
            let _ = writeln!(s, "  low-reward mass  {m:.4}");
        }
        if let Some(p) = &l.initial_action_probs {
            let _ = writeln!(s, "  initial actions  {p:.4?}");
        }
        if let Some(note) = &l.note {
            let _ = writeln!(s, "  note: {note}");
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub field: String,
    pub stored: String,
    pub recomputed: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub missing: Vec<PathBuf>,
    pub discrepancies: Vec<Discrepancy>,
    /// Numbers compared.
    pub checked: usize,
}

impl VerifyOutcome {
    pub fn passed(&self) -> bool {
        self.missing.is_empty() && self.discrepancies.is_empty()
    }
}

/// Recompute every number of `<dir>/report.json` from the stored config,
/// datasets and checkpoints.
pub fn verify_report(dir: &Path) -> Result<VerifyOutcome> {
    let mut outcome = VerifyOutcome::default();
    let need = |rel: &str, outcome: &mut VerifyOutcome| {
        let p = dir.join(rel);
        if p.is_file() {
            Some(p)
        } else {
            outcome.missing.push(p);
            None
        }
    };
    let config_path = need("config.json", &mut outcome);
    let report_path = need("report.json", &mut outcome);
    let data_paths: Vec<Option<PathBuf>> = ["data/train.ds.jsonl", "data/val.ds.jsonl", "data/test.ds.jsonl"]
        .iter()
        .map(|r| need(r, &mut outcome))
        .collect();
    let (Some(config_path), Some(report_path)) = (config_path, report_path) else {
        return Ok(outcome);
    };
    let report_text = fs::read_to_string(&report_path).map_err(|e| Error::io(&report_path, e))?;
    let stored: Report = serde_json::from_str(&report_text)?;
    for cell in &stored.cells {
        for c in &cell.checkpoints {
            need(&c.file, &mut outcome);
        }
    }
    if !outcome.missing.is_empty() {
        return Ok(outcome);
    }
    let config_text = fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
    let config: ExperimentConfig = serde_json::from_str(&config_text)?;
    let load = |i: usize| Dataset::load(data_paths[i].as_ref().expect("checked"));
    let data = with_data(&config, load(0)?, load(1)?, load(2)?)?;

    let cells = expand_grid(&config.grid, config.seed);
    if cells.len() != stored.cells.len() {
        outcome.discrepancies.push(Discrepancy {
            field: "cells".into(),
            stored: stored.cells.len().to_string(),
            recomputed: cells.len().to_string(),
        });
        return Ok(outcome);
    }
    let rules = build_rules(&config.grid, &data);
    let runs: Vec<CellRun> = cells
        .iter()
        .zip(&stored.cells)
        .map(|(cell, sc)| {
            if sc.status != "ok" {
                return Ok(Err(sc.error.clone().unwrap_or_default()));
            }
            let masks = match rule_for(&rules, &cell.config.learner) {
                Ok(m) => m,
                Err(e) => return Ok(Err(e.clone())),
            };
            sc.checkpoints
                .iter()
                .map(|c| recompute_checkpoint(dir, &c.file, c.step, &cell.config, &data, masks))
                .collect::<Result<Vec<_>>>()
                .map(Ok)
        })
        .collect::<Result<_>>()?;
    let recomputed = assemble(&config, &data, &rules, &cells, &runs)?;
    let stored_value: Value = serde_json::from_str(&report_text)?;
    let recomputed_value = serde_json::to_value(&recomputed)?;
    compare_values("", &stored_value, &recomputed_value, &mut outcome);
    Ok(outcome)
}

fn recompute_checkpoint(
    dir: &Path,
    file: &str,
    step: usize,
    config: &TrainConfig,
    data: &PreparedData,
    masks: &RuleMasks,
) -> Result<Checkpoint> {
    let params = PolicyParams::load(dir.join(file))?.policy;
    let og = objective_gradient(
        &params,
        &data.train,
        masks.train.as_ref(),
        config.truncation,
        config.lambda,
    )?;
    let validation = validation_estimate(&params, &data.val, masks.val.as_ref(), config.truncation)?;
    Ok(Checkpoint {
        step,
        params,
        train_objective: og.objective,
        train_value: og.value,
        train_ess: og.ess,
        validation,
    })
}

fn compare_values(path: &str, stored: &Value, recomputed: &Value, out: &mut VerifyOutcome) {
    let mismatch = |out: &mut VerifyOutcome| {
        out.discrepancies.push(Discrepancy {
            field: if path.is_empty() {
                "<root>".into()
            } else {
                path.to_string()
            },
            stored: stored.to_string(),
            recomputed: recomputed.to_string(),
        })
    };
    match (stored, recomputed) {
        (Value::Number(a), Value::Number(b)) => {
            out.checked += 1;
            let (a, b) = (a.as_f64().unwrap_or(f64::NAN), b.as_f64().unwrap_or(f64::NAN));
            if !((a - b).abs() <= VERIFY_TOLERANCE * a.abs().max(b.abs()).max(1.0)) {
                mismatch(out);
            }
        }
        (Value::Object(a), Value::Object(b)) => {
            let keys: BTreeSet<&String> = a.keys().chain(b.keys()).collect();
            for k in keys {
                let child = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match (a.get(k), b.get(k)) {
                    (Some(x), Some(y)) => compare_values(&child, x, y, out),
                    (x, y) => out.discrepancies.push(Discrepancy {
                        field: child,
                        stored: x.map_or("<absent>".into(), |v| v.to_string()),
                        recomputed: y.map_or("<absent>".into(), |v| v.to_string()),
                    }),
                }
            }
        }
        (Value::Array(a), Value::Array(b)) if a.len() == b.len() => {
            for (i, (x, y)) in a.iter().zip(b).enumerate() {
                compare_values(&format!("{path}[{i}]"), x, y, out);
            }
        }
        (a, b) if a == b => {}
        _ => mismatch(out),
    }
}

/// `(cell, step, validation value, validation ESS)` of a reselected checkpoint.
pub type Choice = (String, usize, f64, f64);

/// Re-run selection on a finished report with another ESS threshold,
/// using the stored validation metrics only.
pub fn reselect(report: &Report, mode: SelectionMode, ess_threshold: f64) -> Vec<(String, Option<Choice>)> {
    let mut names: Vec<String> = Vec::new();
    for c in &report.cells {
        let n = c.config.learner.name().to_string();
        if !names.contains(&n) {
            names.push(n);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let mut best: Option<Choice> = None;
            for c in report
                .cells
                .iter()
                .filter(|c| c.config.learner.name() == name && c.status == "ok")
            {
                let candidates: Vec<&CheckpointMetrics> = match mode {
                    SelectionMode::BestCheckpoint => c.checkpoints.iter().collect(),
                    SelectionMode::Final => c.checkpoints.last().into_iter().collect(),
                };
                for m in candidates {
                    let Some(v) = m.validation.as_ref().filter(|v| v.ess >= ess_threshold) else {
                        continue;
                    };
                    let better = match &best {
                        None => true,
                        Some((_, bs, bv, _)) => v.value > *bv || (v.value == *bv && m.step < *bs),
                    };
                    if better {
                        best = Some((c.id.clone(), m.step, v.value, v.ess));
                    }
                }
            }
            (name, best)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(with = "maybe_inf")]
    pub delta: f64,
    pub train: Option<Estimate>,
    pub test: Option<Estimate>,
    pub mc: Option<McValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Train and select a POELA policy per radius with the rest of `config`
/// unchanged, reporting training and test estimates.
pub fn delta_sweep(config: &ExperimentConfig, deltas: &[f64], data: &PreparedData) -> Result<Vec<SweepRow>> {
    deltas
        .iter()
        .map(|&delta| {
            let mut cfg = config.clone();
            cfg.grid.learners = vec![LearnerKind::Poela { delta }];
            cfg.evaluation.bootstrap = None;
            let report = execute(&cfg, data, None)?;
            let l = &report.learners[0];
            Ok(SweepRow {
                delta,
                train: l.train.clone(),
                test: l.test.clone(),
                mc: l.mc,
                note: l.note.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRow {
    pub traj: usize,
    pub step: usize,
    pub eligible: usize,
    pub threshold: usize,
    pub jaccard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskComparison {
    #[serde(with = "maybe_inf")]
    pub delta: f64,
    pub threshold: f64,
    pub rows: Vec<MaskRow>,
    pub mean_jaccard: f64,
    /// Samples where the radius rule allows strictly fewer actions.
    pub eligible_more_conservative: usize,
    /// Samples where the behavior threshold allows strictly fewer actions.
    pub threshold_more_conservative: usize,
}

/// Per-sample comparison of the radius rule and the `μ̂ > b` rule (both
/// including the logged action) on one dataset.
pub fn diagnose_masks(
    dataset: &Dataset,
    delta: f64,
    behavior: &(impl Policy + ?Sized),
    threshold: f64,
) -> Result<MaskComparison> {
    let index = NeighborIndex::build(dataset)?;
    let eligible = precompute_masks(&index, dataset, delta)?;
    let thresholded = overlap_mask(behavior, dataset, threshold)?;
    let mut rows = Vec::with_capacity(dataset.total_steps());
    let (mut more_e, mut more_t) = (0, 0);
    for (((traj, step), e), (_, t)) in eligible.rows().zip(thresholded.rows()) {
        let (se, st) = (to_set(e), to_set(t));
        let union = se.union(&st).count();
        let jaccard = se.intersection(&st).count() as f64 / union as f64;
        if se.len() < st.len() {
            more_e += 1;
        } else if st.len() < se.len() {
            more_t += 1;
        }
        rows.push(MaskRow {
            traj,
            step,
            eligible: se.len(),
            threshold: st.len(),
            jaccard,
        });
    }
    let mean_jaccard = rows.iter().map(|r| r.jaccard).sum::<f64>() / rows.len() as f64;
    Ok(MaskComparison {
        delta,
        threshold,
        rows,
        mean_jaccard,
        eligible_more_conservative: more_e,
        threshold_more_conservative: more_t,
    })
}
