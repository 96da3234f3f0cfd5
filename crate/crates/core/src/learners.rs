//! Full-batch gradient ascent on the variance-penalized SNTIS objective for
//! the eligible-action learner (POELA) and its baselines (PO-CRM, PO-μ),
//! checkpointing and checkpoint selection.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::behavior::{overlap_mask, ThresholdOracle};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{compute_weights, sntis_value_from, Estimate};
use crate::neighborhood::{precompute_masks, EligibleMask, EligibleOracle, NeighborIndex};
use crate::policy::{
    objective_gradient, Architecture, MaskOracle, MaskedPolicy, MaskedSteps, Policy, PolicyParams, StepPolicy,
};
use crate::seed;
use crate::serde_util::maybe_inf;

/// Re-initializations tried when the initial policy has zero total weight.
pub const MAX_INIT_ATTEMPTS: usize = 5;

pub const DEFAULT_DELTAS: [f64; 3] = [0.05, 0.1, 0.5];
pub const DEFAULT_LAMBDAS: [f64; 4] = [0.0, 0.1, 1.0, 10.0];
pub const DEFAULT_TRUNCATION: f64 = 1000.0;
pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.01, 0.05, 0.1, 0.2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "learner", rename_all = "kebab-case")]
pub enum LearnerKind {
    /// Eligible-action constrained learner with neighborhood radius `delta`.
    Poela {
        #[serde(with = "maybe_inf")]
        delta: f64,
    },
    /// Unconstrained counterfactual risk minimization.
    PoCrm,
    /// Actions restricted to `μ̂(a|x) > threshold`.
    PoMu { threshold: f64 },
}

impl LearnerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LearnerKind::Poela { .. } => "poela",
            LearnerKind::PoCrm => "po-crm",
            LearnerKind::PoMu { .. } => "po-mu",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub learner: LearnerKind,
    #[serde(default = "default_architecture")]
    pub architecture: Architecture,
    pub lambda: f64,
    /// Truncation level `M`.
    #[serde(rename = "M", with = "maybe_inf")]
    pub truncation: f64,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
}

fn default_architecture() -> Architecture {
    Architecture::LinearSoftmax
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        match self.learner {
            LearnerKind::Poela { delta } if !(delta >= 0.0) => return bad(format!("delta must be >= 0, got {delta}")),
            LearnerKind::PoMu { threshold } if !(threshold >= 0.0) => {
                return bad(format!("threshold must be >= 0, got {threshold}"))
            }
            _ => {}
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.truncation > 0.0) {
            return bad(format!("M must be > 0, got {}", self.truncation));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate must be > 0, got {}", self.learning_rate));
        }
        if self.max_steps == 0 || self.checkpoint_every == 0 {
            return bad("max_steps and checkpoint_every must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub params: PolicyParams,
    pub train_objective: f64,
    pub train_value: f64,
    pub train_ess: f64,
    /// `None` when the policy has no overlap with the validation data.
    pub validation: Option<Estimate>,
}

impl Checkpoint {
    pub fn validation_ess(&self) -> f64 {
        self.validation.as_ref().map_or(0.0, |e| e.ess)
    }
}

/// How a learner restricts actions, both on its training samples and on
/// contexts it has not seen.
#[derive(Clone)]
pub enum MaskRule {
    Unconstrained,
    Eligible { index: Arc<NeighborIndex>, delta: f64 },
    Behavior { behavior: Arc<dyn Policy>, threshold: f64 },
}

impl MaskRule {
    /// Rule for `learner` given training data and (for PO-μ) `μ̂`.
    pub fn for_learner(learner: &LearnerKind, train: &Dataset, behavior: Option<Arc<dyn Policy>>) -> Result<Self> {
        Ok(match *learner {
            LearnerKind::PoCrm => MaskRule::Unconstrained,
            LearnerKind::Poela { delta } => MaskRule::Eligible {
                index: Arc::new(NeighborIndex::build(train)?),
                delta,
            },
            LearnerKind::PoMu { threshold } => MaskRule::Behavior {
                behavior: behavior.ok_or_else(|| Error::InvalidInput("PO-μ needs a behavior estimate".into()))?,
                threshold,
            },
        })
    }

    /// Masks on the training samples. Every mask contains the logged action.
    pub fn training_masks(&self, train: &Dataset) -> Result<Option<EligibleMask>> {
        match self {
            MaskRule::Unconstrained => Ok(None),
            MaskRule::Eligible { index, delta } => {
                if index.fingerprint() != train.fingerprint() {
                    return Err(Error::InvalidInput("index was built on different data".into()));
                }
                precompute_masks(index, train, *delta).map(Some)
            }
            MaskRule::Behavior { behavior, threshold } => overlap_mask(behavior.as_ref(), train, *threshold).map(Some),
        }
    }

    pub fn oracle(&self) -> Option<Arc<dyn MaskOracle>> {
        match self {
            MaskRule::Unconstrained => None,
            MaskRule::Eligible { index, delta } => Some(Arc::new(EligibleOracle {
                index: index.clone(),
                delta: *delta,
            })),
            MaskRule::Behavior { behavior, threshold } => Some(Arc::new(ThresholdOracle {
                behavior: behavior.clone(),
                floor: *threshold,
            })),
        }
    }

    /// Masks for a dataset the rule was not built from. Contexts where the
    /// rule allows nothing get an all-true mask (the base policy is used).
    pub fn query_masks(&self, dataset: &Dataset) -> Result<Option<EligibleMask>> {
        let Some(oracle) = self.oracle() else {
            return Ok(None);
        };
        let a = dataset.action_count();
        let rows = dataset
            .trajectories()
            .iter()
            .map(|t| {
                t.contexts
                    .iter()
                    .map(|x| {
                        let m = oracle.mask(x);
                        if m.iter().any(|&b| b) {
                            m
                        } else {
                            vec![true; a]
                        }
                    })
                    .collect()
            })
            .collect();
        EligibleMask::from_rows(dataset, f64::NAN, rows).map(Some)
    }

    /// The deployable policy: `params` renormalized by this rule.
    pub fn deploy(&self, params: PolicyParams) -> DeployedPolicy {
        DeployedPolicy {
            inner: match self.oracle() {
                None => Deployed::Plain(params),
                Some(oracle) => Deployed::Masked(MaskedPolicy::new(params, oracle)),
            },
        }
    }
}

#[derive(Clone)]
enum Deployed {
    Plain(PolicyParams),
    Masked(MaskedPolicy<PolicyParams>),
}

/// A trained policy together with its query-time mask rule.
#[derive(Clone)]
pub struct DeployedPolicy {
    inner: Deployed,
}

impl DeployedPolicy {
    pub fn params(&self) -> &PolicyParams {
        match &self.inner {
            Deployed::Plain(p) => p,
            Deployed::Masked(m) => &m.base,
        }
    }
}

impl Policy for DeployedPolicy {
    fn action_count(&self) -> usize {
        self.params().action_count
    }

    fn action_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.inner {
            Deployed::Plain(p) => p.action_probs(x),
            Deployed::Masked(m) => m.action_probs(x),
        }
    }
}

/// SNTIS estimate of `params` under optional per-sample masks.
pub fn masked_estimate(
    params: &PolicyParams,
    dataset: &Dataset,
    masks: Option<&EligibleMask>,
    truncation: f64,
) -> Result<Estimate> {
    let weights = match masks {
        Some(m) => compute_weights(&MaskedSteps { base: params, masks: m }, dataset, truncation)?,
        None => compute_weights(params as &dyn StepPolicy, dataset, truncation)?,
    };
    sntis_value_from(&weights, &dataset.returns())
}

/// `masked_estimate` with "no overlap" mapped to `None`.
pub fn validation_estimate(
    params: &PolicyParams,
    dataset: &Dataset,
    masks: Option<&EligibleMask>,
    truncation: f64,
) -> Result<Option<Estimate>> {
    match masked_estimate(params, dataset, masks, truncation) {
        Ok(e) => Ok(Some(e)),
        Err(Error::NoOverlap) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Training loop shared by every learner. `train_masks` constrain the
/// objective; `val_masks` are used for the validation estimate.
pub fn train_with_masks(
    config: &TrainConfig,
    train: &Dataset,
    train_masks: Option<&EligibleMask>,
    val: &Dataset,
    val_masks: Option<&EligibleMask>,
) -> Result<Vec<Checkpoint>> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if val.feature_dim() != train.feature_dim() || val.action_count() != train.action_count() {
        return Err(Error::InvalidInput(
            "train and validation data have different shapes".into(),
        ));
    }
    let d = train.feature_dim();
    let a = train.action_count();

    let mut start = None;
    for attempt in 0..MAX_INIT_ATTEMPTS {
        let params = PolicyParams::init(
            config.architecture.clone(),
            d,
            a,
            seed::derive(config.seed, attempt as u64),
        );
        match objective_gradient(&params, train, train_masks, config.truncation, config.lambda) {
            Ok(og) => {
                start = Some((params, og));
                break;
            }
            Err(Error::NoOverlap) => {
                log::warn!("initial policy has zero weight (attempt {attempt}), re-initializing");
            }
            Err(e) => return Err(e),
        }
    }
    let (mut params, mut og) = start.ok_or(Error::Training {
        step: 0,
        message: format!("zero total weight after {MAX_INIT_ATTEMPTS} initializations"),
    })?;

    let mut checkpoints = Vec::new();
    for step in 0..=config.max_steps {
        if step > 0 {
            og = objective_gradient(&params, train, train_masks, config.truncation, config.lambda).map_err(|e| {
                Error::Training {
                    step,
                    message: e.to_string(),
                }
            })?;
        }
        if !og.objective.is_finite() || og.gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                step,
                message: "non-finite objective or gradient".into(),
            });
        }
        if step > 0 && (step % config.checkpoint_every == 0 || step == config.max_steps) {
            checkpoints.push(Checkpoint {
                step,
                params: params.clone(),
                train_objective: og.objective,
                train_value: og.value,
                train_ess: og.ess,
                validation: validation_estimate(&params, val, val_masks, config.truncation)?,
            });
        }
        if step == config.max_steps {
            break;
        }
        for (p, g) in params.params.iter_mut().zip(&og.gradient) {
            *p += config.learning_rate * g;
        }
    }
    Ok(checkpoints)
}

/// Train with the masks implied by `rule`.
pub fn train_with_rule(
    config: &TrainConfig,
    rule: &MaskRule,
    train: &Dataset,
    val: &Dataset,
) -> Result<Vec<Checkpoint>> {
    let train_masks = rule.training_masks(train)?;
    let val_masks = rule.query_masks(val)?;
    train_with_masks(config, train, train_masks.as_ref(), val, val_masks.as_ref())
}

pub fn train_poela(config: &TrainConfig, train: &Dataset, val: &Dataset) -> Result<Vec<Checkpoint>> {
    if !matches!(config.learner, LearnerKind::Poela { .. }) {
        return Err(Error::InvalidInput("train_poela needs a POELA config".into()));
    }
    let rule = MaskRule::for_learner(&config.learner, train, None)?;
    train_with_rule(config, &rule, train, val)
}

pub fn train_pocrm(config: &TrainConfig, train: &Dataset, val: &Dataset) -> Result<Vec<Checkpoint>> {
    if config.learner != LearnerKind::PoCrm {
        return Err(Error::InvalidInput("train_pocrm needs a PO-CRM config".into()));
    }
    train_with_rule(config, &MaskRule::Unconstrained, train, val)
}

pub fn train_pomu(
    config: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    behavior: Arc<dyn Policy>,
) -> Result<Vec<Checkpoint>> {
    if !matches!(config.learner, LearnerKind::PoMu { .. }) {
        return Err(Error::InvalidInput("train_pomu needs a PO-μ config".into()));
    }
    let rule = MaskRule::for_learner(&config.learner, train, Some(behavior))?;
    train_with_rule(config, &rule, train, val)
}

/// Which checkpoints of a run are candidates for selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Every saved checkpoint.
    BestCheckpoint,
    /// Only the policy at the end of training.
    Final,
}

/// Index of the checkpoint with the highest validation value among those
/// with validation ESS at least `ess_threshold`; earliest step wins ties.
pub fn select_checkpoint(checkpoints: &[Checkpoint], ess_threshold: f64) -> Option<usize> {
    let mut best: Option<(usize, f64, usize)> = None;
    for (i, c) in checkpoints.iter().enumerate() {
        let Some(v) = c.validation.as_ref().filter(|e| e.ess >= ess_threshold) else {
            continue;
        };
        let better = match best {
            None => true,
            Some((_, bv, bs)) => v.value > bv || (v.value == bv && c.step < bs),
        };
        if better {
            best = Some((i, v.value, c.step));
        }
    }
    best.map(|(i, _, _)| i)
}

/// [`select_checkpoint`] over the candidates of `mode`.
pub fn select(checkpoints: &[Checkpoint], mode: SelectionMode, ess_threshold: f64) -> Option<usize> {
    match mode {
        SelectionMode::BestCheckpoint => select_checkpoint(checkpoints, ess_threshold),
        SelectionMode::Final => {
            let last = checkpoints.len().checked_sub(1)?;
            select_checkpoint(&checkpoints[last..], ess_threshold).map(|_| last)
        }
    }
}

/// Index of the policy with the largest SNTIS estimate on `dataset`
/// (first wins ties); policies with no overlap are skipped.
pub fn select_from_class<P: Policy>(policies: &[P], dataset: &Dataset, truncation: f64) -> Result<Option<usize>> {
    let returns = dataset.returns();
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in policies.iter().enumerate() {
        let w = compute_weights(p, dataset, truncation)?;
        let v = match sntis_value_from(&w, &returns) {
            Ok(e) => e.value,
            Err(Error::NoOverlap) => continue,
            Err(e) => return Err(e),
        };
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((i, v));
        }
    }
    Ok(best.map(|(i, _)| i))
}
