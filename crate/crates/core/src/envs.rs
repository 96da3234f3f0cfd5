//! Synthetic contextual decision processes: the propensity-overfitting
//! counterexamples, a generic discrete bandit, and a seeded non-Markov
//! dosing simulator with continuous contexts.
//!
//! Context encodings (fixed):
//!
//! * `example1`, `bandit`: one-hot of the context id (`d = |X|`).
//! * `example2`, `example3`: `d = 2 + 2 (H - 1)` laid out as
//!   `[root, post, depth one-hot (H-1), path (H-1)]`. `path[j]` holds
//!   `a + 1` for the action taken at chain depth `j + 1`, zero if not taken
//!   yet. Distinct tree nodes are at distance >= 1.
//! * `synthetic`: `[h / H, log size + noise, concentration, d - 3 noisy mixtures]`.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetInfo, Trajectory};
use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "env", rename_all = "snake_case")]
pub enum EnvSpec {
    /// Bandit where half the contexts reward one action with 1 (others 0)
    /// and the other half give -1 for half the actions and -5 for the rest.
    Example1 { contexts: usize, actions: usize, seed: u64 },
    /// Root action 0 ends with +1 or -1 (even odds); any other root action
    /// pays +1 and then ends (even odds) or enters an (H-1)-step chain of
    /// choices that always finishes with -5.
    Example2 { horizon: usize, actions: usize },
    /// Example 2 where root actions 0 and 2 both lead to the same aliased
    /// context; after action 0 the next step pays +-1, after action 2 it pays -5.
    Example3 { horizon: usize, actions: usize },
    /// Discrete one-step bandit with Bernoulli rewards of the given means.
    Bandit {
        /// `means[x][a]` in [0, 1].
        means: Vec<Vec<f64>>,
        /// Initial context distribution; uniform when absent.
        #[serde(default)]
        context_probs: Option<Vec<f64>>,
    },
    /// Seeded dosing simulator with a hidden per-episode sensitivity.
    Synthetic {
        dim: usize,
        actions: usize,
        horizon: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Example1Table {
    contexts: usize,
    actions: usize,
    rewards: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
struct SynthParams {
    dim: usize,
    actions: usize,
    horizon: usize,
    growth: f64,
    kill: f64,
    decay: f64,
    penalty: f64,
    final_scale: f64,
    obs_noise: f64,
    mixing: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Example1(Example1Table),
    Tree {
        horizon: usize,
        actions: usize,
        aliased: bool,
    },
    Bandit {
        means: Vec<Vec<f64>>,
        context_probs: Vec<f64>,
    },
    Synthetic(SynthParams),
}

/// Environment state. Finite environments enumerate these.
#[derive(Debug, Clone, PartialEq)]
pub enum State {
    Context(usize),
    Root,
    Chain(Vec<usize>),
    Post { after_alias: bool },
    Synthetic(SynthState),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthState {
    step: usize,
    sensitivity: f64,
    size: f64,
    initial_size: f64,
    concentration: f64,
    noise: Vec<f64>,
}

pub const SYNTHETIC_R_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Env {
    spec: EnvSpec,
    kind: Kind,
}

pub fn make_env(spec: &EnvSpec) -> Result<Env> {
    let invalid = |m: &str| Err(Error::InvalidInput(format!("invalid env spec: {m}")));
    let kind = match spec {
        &EnvSpec::Example1 {
            contexts,
            actions,
            seed: s,
        } => {
            if contexts == 0 || contexts % 2 != 0 {
                return invalid("example1 needs a positive even number of contexts");
            }
            if actions < 2 || actions % 2 != 0 {
                return invalid("example1 needs a positive even number of actions");
            }
            let mut rng = seed::rng(s);
            let rewards = (0..contexts)
                .map(|x| {
                    if x < contexts / 2 {
                        let good = rng.random_range(0..actions);
                        (0..actions).map(|a| if a == good { 1.0 } else { 0.0 }).collect()
                    } else {
                        let mut row: Vec<f64> = (0..actions)
                            .map(|a| if a < actions / 2 { -1.0 } else { -5.0 })
                            .collect();
                        row.shuffle(&mut rng);
                        row
                    }
                })
                .collect();
            Kind::Example1(Example1Table {
                contexts,
                actions,
                rewards,
            })
        }
        &EnvSpec::Example2 { horizon, actions } => {
            if horizon < 2 || actions < 2 {
                return invalid("example2 needs horizon >= 2 and at least 2 actions");
            }
            Kind::Tree {
                horizon,
                actions,
                aliased: false,
            }
        }
        &EnvSpec::Example3 { horizon, actions } => {
            if horizon < 2 || actions < 3 {
                return invalid("example3 needs horizon >= 2 and at least 3 actions");
            }
            Kind::Tree {
                horizon,
                actions,
                aliased: true,
            }
        }
        EnvSpec::Bandit { means, context_probs } => {
            if means.is_empty() || means[0].is_empty() {
                return invalid("bandit needs at least one context and one action");
            }
            let a = means[0].len();
            if means
                .iter()
                .any(|row| row.len() != a || row.iter().any(|m| !(0.0..=1.0).contains(m)))
            {
                return invalid("bandit means must be a rectangular table in [0, 1]");
            }
            let probs = match context_probs {
                Some(p) => {
                    if p.len() != means.len()
                        || p.iter().any(|v| !(*v >= 0.0))
                        || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9
                    {
                        return invalid("bandit context_probs must be a distribution over contexts");
                    }
                    p.clone()
                }
                None => vec![1.0 / means.len() as f64; means.len()],
            };
            Kind::Bandit {
                means: means.clone(),
                context_probs: probs,
            }
        }
        &EnvSpec::Synthetic {
            dim,
            actions,
            horizon,
            seed: s,
        } => {
            if dim < 3 || actions < 2 || horizon == 0 {
                return invalid("synthetic needs dim >= 3, actions >= 2, horizon >= 1");
            }
            let mut rng = seed::rng(s);
            let mixing = (0..dim - 3)
                .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect();
            Kind::Synthetic(SynthParams {
                dim,
                actions,
                horizon,
                growth: rng.random_range(0.02..0.06),
                kill: rng.random_range(0.08..0.2),
                decay: rng.random_range(0.5..0.8),
                penalty: rng.random_range(0.05..0.15),
                final_scale: rng.random_range(4.0..8.0),
                obs_noise: 0.05,
                mixing,
            })
        }
    };
    Ok(Env {
        spec: spec.clone(),
        kind,
    })
}

/// Outcome of taking an action: probability, reward, next state (`None` ends
/// the episode).
pub type Outcome = (f64, f64, Option<State>);

impl Env {
    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn action_count(&self) -> usize {
        match &self.kind {
            Kind::Example1(t) => t.actions,
            Kind::Tree { actions, .. } => *actions,
            Kind::Bandit { means, .. } => means[0].len(),
            Kind::Synthetic(p) => p.actions,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match &self.kind {
            Kind::Example1(t) => t.contexts,
            Kind::Tree { horizon, .. } => 2 + 2 * (horizon - 1),
            Kind::Bandit { means, .. } => means.len(),
            Kind::Synthetic(p) => p.dim,
        }
    }

    pub fn horizon(&self) -> usize {
        match &self.kind {
            Kind::Example1(_) | Kind::Bandit { .. } => 1,
            Kind::Tree { horizon, .. } => *horizon,
            Kind::Synthetic(p) => p.horizon,
        }
    }

    pub fn r_max(&self) -> f64 {
        match &self.kind {
            Kind::Example1(_) => 5.0,
            Kind::Tree { .. } => 5.0,
            Kind::Bandit { .. } => 1.0,
            Kind::Synthetic(_) => SYNTHETIC_R_MAX,
        }
    }

    pub fn is_finite(&self) -> bool {
        !matches!(self.kind, Kind::Synthetic(_))
    }

    /// Reward of a context/action pair in the example1 bandit.
    pub fn example1_reward(&self, context: usize, action: usize) -> Option<f64> {
        match &self.kind {
            Kind::Example1(t) => Some(t.rewards[context][action]),
            _ => None,
        }
    }

    /// Bernoulli means of the bandit environment.
    pub fn bandit_means(&self) -> Option<&[Vec<f64>]> {
        match &self.kind {
            Kind::Bandit { means, .. } => Some(means),
            _ => None,
        }
    }

    pub fn context(&self, state: &State) -> Vec<f64> {
        match (&self.kind, state) {
            (Kind::Example1(_), State::Context(x)) | (Kind::Bandit { .. }, State::Context(x)) => {
                let mut v = vec![0.0; self.feature_dim()];
                v[*x] = 1.0;
                v
            }
            (Kind::Tree { horizon, .. }, _) => {
                let k = horizon - 1;
                let mut v = vec![0.0; 2 + 2 * k];
                match state {
                    State::Root => v[0] = 1.0,
                    State::Post { .. } => v[1] = 1.0,
                    State::Chain(path) => {
                        v[2 + path.len()] = 1.0;
                        for (j, &a) in path.iter().enumerate() {
                            v[2 + k + j] = (a + 1) as f64;
                        }
                    }
                    _ => unreachable!("tree state"),
                }
                v
            }
            (Kind::Synthetic(p), State::Synthetic(s)) => {
                let log_size = s.size.ln() + s.noise[0];
                let mut v = Vec::with_capacity(p.dim);
                v.push(s.step as f64 / p.horizon as f64);
                v.push(log_size);
                v.push(s.concentration);
                for (j, m) in p.mixing.iter().enumerate() {
                    v.push(m[0] * log_size + m[1] * s.concentration + s.noise[1 + j]);
                }
                v
            }
            _ => unreachable!("state does not belong to this environment"),
        }
    }

    /// Time index encoded in a context produced by this environment.
    pub fn step_of(&self, x: &[f64]) -> usize {
        match &self.kind {
            Kind::Example1(_) | Kind::Bandit { .. } => 0,
            Kind::Tree { horizon, .. } => {
                if x[0] == 1.0 {
                    0
                } else if x[1] == 1.0 {
                    1
                } else {
                    (0..horizon - 1).find(|&j| x[2 + j] == 1.0).map_or(0, |j| j + 1)
                }
            }
            Kind::Synthetic(p) => (x[0] * p.horizon as f64).round().max(0.0) as usize,
        }
    }

    /// Id of a discrete one-hot context.
    pub fn context_index(&self, x: &[f64]) -> Option<usize> {
        match &self.kind {
            Kind::Example1(_) | Kind::Bandit { .. } => x.iter().position(|&v| v == 1.0),
            _ => None,
        }
    }

    /// Initial state distribution for finite environments.
    pub fn initial_distribution(&self) -> Option<Vec<(f64, State)>> {
        match &self.kind {
            Kind::Example1(t) => Some(
                (0..t.contexts)
                    .map(|x| (1.0 / t.contexts as f64, State::Context(x)))
                    .collect(),
            ),
            Kind::Bandit { context_probs, .. } => Some(
                context_probs
                    .iter()
                    .enumerate()
                    .map(|(x, &p)| (p, State::Context(x)))
                    .collect(),
            ),
            Kind::Tree { .. } => Some(vec![(1.0, State::Root)]),
            Kind::Synthetic(_) => None,
        }
    }

    pub fn initial_contexts(&self) -> Option<Vec<Vec<f64>>> {
        self.initial_distribution()
            .map(|d| d.iter().map(|(_, s)| self.context(s)).collect())
    }

    /// Enumerated outcomes of a finite environment.
    pub fn transitions(&self, state: &State, action: usize) -> Option<Vec<Outcome>> {
        match (&self.kind, state) {
            (Kind::Example1(t), State::Context(x)) => Some(vec![(1.0, t.rewards[*x][action], None)]),
            (Kind::Bandit { means, .. }, State::Context(x)) => {
                let m = means[*x][action];
                Some(vec![(m, 1.0, None), (1.0 - m, 0.0, None)])
            }
            (&Kind::Tree { horizon, aliased, .. }, _) => Some(match state {
                State::Root => match action {
                    0 if aliased => vec![(1.0, 0.0, Some(State::Post { after_alias: false }))],
                    0 => vec![(0.5, 1.0, None), (0.5, -1.0, None)],
                    2 if aliased => vec![(1.0, 0.0, Some(State::Post { after_alias: true }))],
                    _ => vec![(0.5, 1.0, None), (0.5, 1.0, Some(State::Chain(Vec::new())))],
                },
                State::Post { after_alias: false } => vec![(0.5, 1.0, None), (0.5, -1.0, None)],
                State::Post { after_alias: true } => vec![(1.0, -5.0, None)],
                State::Chain(path) => {
                    // Chain depth path.len() + 1 of H - 1.
                    if path.len() + 1 == horizon - 1 {
                        vec![(1.0, -5.0, None)]
                    } else {
                        let mut next = path.clone();
                        next.push(action);
                        vec![(1.0, 0.0, Some(State::Chain(next)))]
                    }
                }
                _ => unreachable!("tree state"),
            }),
            _ => None,
        }
    }

    pub fn sample_initial(&self, rng: &mut ChaCha8Rng) -> State {
        match &self.kind {
            Kind::Synthetic(p) => {
                let normal = Normal::<f64>::new(0.0, 1.0).expect("unit normal");
                let sensitivity = (0.3 * normal.sample(rng)).exp();
                let size = (0.2 * normal.sample(rng)).exp();
                let mut s = SynthState {
                    step: 0,
                    sensitivity,
                    size,
                    initial_size: size,
                    concentration: 0.0,
                    noise: Vec::new(),
                };
                s.noise = (0..p.dim - 2).map(|_| p.obs_noise * normal.sample(rng)).collect();
                State::Synthetic(s)
            }
            _ => {
                let dist = self.initial_distribution().expect("finite");
                sample_outcome(rng, dist.iter().map(|(p, _)| *p), dist.len())
                    .map(|i| dist[i].1.clone())
                    .expect("nonempty distribution")
            }
        }
    }

    pub fn sample_step(&self, state: &State, action: usize, rng: &mut ChaCha8Rng) -> (f64, Option<State>) {
        match (&self.kind, state) {
            (Kind::Synthetic(p), State::Synthetic(s)) => {
                let dose = action as f64 / (p.actions - 1) as f64;
                let concentration = p.decay * s.concentration + dose;
                let size = s.size * (p.growth - p.kill * s.sensitivity * concentration).exp();
                let mut reward = -p.penalty * dose;
                let step = s.step + 1;
                if step == p.horizon {
                    reward += p.final_scale * (s.initial_size - size) / s.initial_size;
                    return (reward.clamp(-SYNTHETIC_R_MAX, SYNTHETIC_R_MAX), None);
                }
                let normal = Normal::<f64>::new(0.0, 1.0).expect("unit normal");
                let next = SynthState {
                    step,
                    sensitivity: s.sensitivity,
                    size,
                    initial_size: s.initial_size,
                    concentration,
                    noise: (0..p.dim - 2).map(|_| p.obs_noise * normal.sample(rng)).collect(),
                };
                (
                    reward.clamp(-SYNTHETIC_R_MAX, SYNTHETIC_R_MAX),
                    Some(State::Synthetic(next)),
                )
            }
            _ => {
                let outcomes = self.transitions(state, action).expect("finite env");
                let i = sample_outcome(rng, outcomes.iter().map(|o| o.0), outcomes.len()).expect("outcomes");
                let (_, r, next) = outcomes.into_iter().nth(i).expect("index");
                (r, next)
            }
        }
    }

    /// Run one episode, choosing actions from `probs_at(context)`.
    pub fn rollout(
        &self,
        rng: &mut ChaCha8Rng,
        mut probs_at: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    ) -> Result<Trajectory> {
        let mut state = self.sample_initial(rng);
        let mut t = Trajectory {
            contexts: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            behavior_probs: Vec::new(),
            meta: None,
        };
        loop {
            let x = self.context(&state);
            let probs = probs_at(&x)?;
            let a = sample_outcome(rng, probs.iter().copied(), probs.len())
                .ok_or_else(|| Error::InvalidInput("policy returned no probability mass".into()))?;
            let (r, next) = self.sample_step(&state, a, rng);
            t.behavior_probs.push(probs[a]);
            t.contexts.push(x);
            t.actions.push(a);
            t.rewards.push(r);
            match next {
                Some(s) => state = s,
                None => return Ok(t),
            }
        }
    }
}

fn sample_outcome(rng: &mut ChaCha8Rng, probs: impl Iterator<Item = f64>, len: usize) -> Option<usize> {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = None;
    for (i, p) in probs.enumerate() {
        if p > 0.0 {
            last_positive = Some(i);
        }
        acc += p;
        if u < acc && p > 0.0 {
            return Some(i);
        }
    }
    debug_assert!(len > 0);
    last_positive
}

/// Logging policy of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "behavior", rename_all = "snake_case")]
pub enum BehaviorSpec {
    Uniform,
    /// With probability `prob` follow `schedule[step]`, otherwise act
    /// uniformly at random. The default schedule gives the highest action
    /// for the first nine steps and action 0 afterwards.
    Mixture {
        #[serde(default = "default_mixture_prob")]
        prob: f64,
        #[serde(default)]
        schedule: Option<Vec<usize>>,
    },
    /// Per-context distributions for one-hot context environments.
    Table {
        probs: Vec<Vec<f64>>,
    },
}

fn default_mixture_prob() -> f64 {
    0.7
}

/// A [`BehaviorSpec`] bound to an environment; a context-only policy.
#[derive(Debug, Clone)]
pub struct EnvBehavior {
    env: Arc<Env>,
    spec: BehaviorSpec,
}

impl EnvBehavior {
    pub fn new(env: Arc<Env>, spec: BehaviorSpec) -> Result<Self> {
        let a = env.action_count();
        match &spec {
            BehaviorSpec::Uniform => {}
            BehaviorSpec::Mixture { prob, schedule } => {
                if !(0.0..=1.0).contains(prob) {
                    return Err(Error::InvalidInput("mixture prob must be in [0, 1]".into()));
                }
                if schedule
                    .as_ref()
                    .is_some_and(|s| s.is_empty() || s.iter().any(|&x| x >= a))
                {
                    return Err(Error::InvalidInput(
                        "mixture schedule has an out-of-range action".into(),
                    ));
                }
            }
            BehaviorSpec::Table { probs } => {
                let ctx = env
                    .initial_contexts()
                    .filter(|_| env.horizon() == 1)
                    .ok_or_else(|| Error::Unsupported("table behavior needs a one-step discrete env".into()))?;
                if probs.len() != ctx.len()
                    || probs.iter().any(|row| {
                        row.len() != a
                            || row.iter().any(|p| !(*p >= 0.0))
                            || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9
                    })
                {
                    return Err(Error::InvalidInput(
                        "behavior table must hold one distribution per context".into(),
                    ));
                }
            }
        }
        Ok(EnvBehavior { env, spec })
    }

    pub fn spec(&self) -> &BehaviorSpec {
        &self.spec
    }
}

impl Policy for EnvBehavior {
    fn action_count(&self) -> usize {
        self.env.action_count()
    }

    fn action_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        let a = self.env.action_count();
        Ok(match &self.spec {
            BehaviorSpec::Uniform => vec![1.0 / a as f64; a],
            BehaviorSpec::Mixture { prob, schedule } => {
                let step = self.env.step_of(x);
                let scheduled = match schedule {
                    Some(s) => s[step.min(s.len() - 1)],
                    None if step < 9 => a - 1,
                    None => 0,
                };
                let mut p = vec![(1.0 - prob) / a as f64; a];
                p[scheduled] += prob;
                p
            }
            BehaviorSpec::Table { probs } => {
                let c = self
                    .env
                    .context_index(x)
                    .ok_or_else(|| Error::InvalidInput("context is not one of the env's contexts".into()))?;
                probs[c].clone()
            }
        })
    }
}

/// Sample `n` logged trajectories with exact propensities.
pub fn generate_logged_data(env: &Env, behavior: &BehaviorSpec, n: usize, seed_value: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidInput("n must be at least 1".into()));
    }
    let env_arc = Arc::new(env.clone());
    let mu = EnvBehavior::new(env_arc, behavior.clone())?;
    let trajectories: Vec<Trajectory> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::rng(seed::derive(seed_value, i as u64));
            env.rollout(&mut rng, |x| mu.action_probs(x))
        })
        .collect::<Result<_>>()?;
    let info = DatasetInfo {
        feature_dim: env.feature_dim(),
        action_count: env.action_count(),
        r_max: env.r_max(),
        h_max: env.horizon(),
        provenance: serde_json::to_string(&serde_json::json!({
            "env": env.spec(),
            "behavior": behavior,
            "n": n,
            "seed": seed_value,
        }))?,
    };
    Dataset::new(trajectories, info)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McValue {
    pub mean: f64,
    pub std_error: f64,
    pub rollouts: usize,
}

/// On-policy Monte Carlo value with standard error.
pub fn mc_value(env: &Env, policy: &(impl Policy + ?Sized), n_rollouts: usize, seed_value: u64) -> Result<McValue> {
    if n_rollouts == 0 {
        return Err(Error::InvalidInput("need at least one rollout".into()));
    }
    let returns: Vec<f64> = (0..n_rollouts)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::rng(seed::derive(seed_value, i as u64));
            env.rollout(&mut rng, |x| policy.action_probs(x))
                .map(|t| t.total_reward())
        })
        .collect::<Result<_>>()?;
    let n = n_rollouts as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std_error = if n_rollouts > 1 {
        (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(McValue {
        mean,
        std_error,
        rollouts: n_rollouts,
    })
}

/// Exact values of a policy in a finite environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleValue {
    /// `(initial context, probability, v^pi(x))`.
    pub per_context: Vec<(Vec<f64>, f64, f64)>,
    /// Expectation over the initial context distribution.
    pub value: f64,
}

impl OracleValue {
    pub fn lookup(&self, x: &[f64]) -> Option<f64> {
        self.per_context
            .iter()
            .find(|(c, _, _)| c.as_slice() == x)
            .map(|(_, _, v)| *v)
    }
}

pub fn oracle_context_value(env: &Env, policy: &(impl Policy + ?Sized)) -> Result<OracleValue> {
    let init = env
        .initial_distribution()
        .ok_or_else(|| Error::Unsupported("oracle values need a finite environment".into()))?;
    let mut per_context = Vec::with_capacity(init.len());
    let mut value = 0.0;
    for (p, s) in init {
        let v = state_value(env, policy, &s)?;
        value += p * v;
        per_context.push((env.context(&s), p, v));
    }
    Ok(OracleValue { per_context, value })
}

fn state_value(env: &Env, policy: &(impl Policy + ?Sized), state: &State) -> Result<f64> {
    let x = env.context(state);
    let probs = policy.action_probs(&x)?;
    let mut v = 0.0;
    for (a, &pa) in probs.iter().enumerate() {
        if pa == 0.0 {
            continue;
        }
        for (p, r, next) in env.transitions(state, a).expect("finite env") {
            let tail = match next {
                Some(s) => state_value(env, policy, &s)?,
                None => 0.0,
            };
            v += pa * p * (r + tail);
        }
    }
    Ok(v)
}

/// Policy given by a lookup table over exact context vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    actions: usize,
    table: BTreeMap<Vec<u64>, Vec<f64>>,
    default: Vec<f64>,
}

impl TabularPolicy {
    /// `default` applies to contexts missing from the table.
    pub fn new(actions: usize, default: Vec<f64>) -> Self {
        TabularPolicy {
            actions,
            table: BTreeMap::new(),
            default,
        }
    }

    pub fn set(&mut self, x: &[f64], probs: Vec<f64>) {
        self.table.insert(x.iter().map(|v| v.to_bits()).collect(), probs);
    }
}

impl Policy for TabularPolicy {
    fn action_count(&self) -> usize {
        self.actions
    }

    fn action_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        Ok(self.table.get(&key).cloned().unwrap_or_else(|| self.default.clone()))
    }
}

pub fn one_hot(actions: usize, a: usize) -> Vec<f64> {
    let mut v = vec![0.0; actions];
    v[a] = 1.0;
    v
}

/// A hand-built example1 log with exactly one positive reward (context 0,
/// its rewarded action) and `n - 1` non-positive observations spread over
/// the remaining contexts, all with uniform propensities; plus the policy
/// that keeps the rewarded action and moves every other logged context to
/// an action never observed there.
pub fn example1_overfit_construction(env: &Env, n: usize) -> Result<(Dataset, TabularPolicy)> {
    let Kind::Example1(t) = &env.kind else {
        return Err(Error::Unsupported("construction needs the example1 environment".into()));
    };
    if n == 0 || n >= t.actions {
        return Err(Error::InvalidInput("construction needs 1 <= n < |A|".into()));
    }
    let mu = 1.0 / t.actions as f64;
    let mut trajectories = Vec::with_capacity(n);
    let mut observed: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let good = t.rewards[0].iter().position(|&r| r == 1.0).expect("rewarded action");
    for i in 0..n {
        let (x, a) = if i == 0 {
            (0, good)
        } else {
            let x = 1 + (i - 1) % (t.contexts - 1);
            // Any non-positive action in this context, rotating over actions.
            let a = (0..t.actions)
                .map(|k| (k + i) % t.actions)
                .find(|&a| t.rewards[x][a] <= 0.0)
                .expect("non-positive action");
            (x, a)
        };
        observed.entry(x).or_default().push(a);
        let mut ctx = vec![0.0; t.contexts];
        ctx[x] = 1.0;
        trajectories.push(Trajectory {
            contexts: vec![ctx],
            actions: vec![a],
            rewards: vec![t.rewards[x][a]],
            behavior_probs: vec![mu],
            meta: None,
        });
    }
    let info = DatasetInfo {
        feature_dim: t.contexts,
        action_count: t.actions,
        r_max: 5.0,
        h_max: 1,
        provenance: "example1 construction".into(),
    };
    let dataset = Dataset::new(trajectories, info)?;

    let mut policy = TabularPolicy::new(t.actions, vec![mu; t.actions]);
    for x in 0..t.contexts {
        let mut ctx = vec![0.0; t.contexts];
        ctx[x] = 1.0;
        let choice = match observed.get(&x) {
            Some(acts) if x == 0 => acts[0],
            Some(acts) => (0..t.actions)
                .find(|a| !acts.contains(a))
                .expect("n < |A| leaves an unobserved action"),
            // Unlogged contexts: the best action.
            None => t.rewards[x]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(a, _)| a)
                .expect("actions"),
        };
        policy.set(&ctx, one_hot(t.actions, choice));
    }
    Ok((dataset, policy))
}
