//! Parameterized softmax policies, mask renormalization, and the analytic
//! gradient of the variance-penalized SNTIS objective.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::neighborhood::EligibleMask;
use crate::seed;

/// A stochastic policy over a finite action set that depends only on the
/// current context.
pub trait Policy: Send + Sync {
    fn action_count(&self) -> usize;
    fn action_probs(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// Probability of the logged action at a given dataset step.
///
/// Every [`Policy`] is a `StepPolicy`. Policies whose constraint depends on
/// the logged sample itself (precomputed per-sample masks, logged-propensity
/// replay) implement only this trait.
pub trait StepPolicy: Sync {
    fn logged_prob(&self, dataset: &Dataset, traj: usize, step: usize) -> Result<f64>;
}

impl<P: Policy + ?Sized> StepPolicy for P {
    fn logged_prob(&self, dataset: &Dataset, traj: usize, step: usize) -> Result<f64> {
        let t = dataset.get(traj);
        let probs = self.action_probs(&t.contexts[step])?;
        let a = t.actions[step];
        probs.get(a).copied().ok_or(Error::InvalidProbability {
            action: a,
            value: f64::NAN,
        })
    }
}

impl<P: Policy + ?Sized> Policy for Arc<P> {
    fn action_count(&self) -> usize {
        (**self).action_count()
    }
    fn action_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        (**self).action_probs(x)
    }
}

impl<P: Policy + ?Sized> Policy for &P {
    fn action_count(&self) -> usize {
        (**self).action_count()
    }
    fn action_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        (**self).action_probs(x)
    }
}

/// Replays the logged propensities, i.e. the target policy equals the
/// behavior policy on every logged step.
#[derive(Debug, Clone, Copy, Default)]
pub struct LoggedBehavior;

impl StepPolicy for LoggedBehavior {
    fn logged_prob(&self, dataset: &Dataset, traj: usize, step: usize) -> Result<f64> {
        Ok(dataset.get(traj).behavior_probs[step])
    }
}

/// Uniform distribution over all actions.
#[derive(Debug, Clone, Copy)]
pub struct UniformPolicy {
    pub actions: usize,
}

impl Policy for UniformPolicy {
    fn action_count(&self) -> usize {
        self.actions
    }
    fn action_probs(&self, _x: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![1.0 / self.actions as f64; self.actions])
    }
}

/// Policy given by an arbitrary closure, handy for hand-built policies.
pub struct FnPolicy<F> {
    actions: usize,
    f: F,
}

impl<F> FnPolicy<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync,
{
    pub fn new(actions: usize, f: F) -> Self {
        FnPolicy { actions, f }
    }
}

impl<F> Policy for FnPolicy<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync,
{
    fn action_count(&self) -> usize {
        self.actions
    }
    fn action_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok((self.f)(x))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    LinearSoftmax,
    /// Fully connected tanh layers followed by a linear softmax head.
    MlpSoftmax {
        hidden: Vec<usize>,
    },
}

impl Architecture {
    fn layer_dims(&self, d: usize, actions: usize) -> Vec<(usize, usize)> {
        match self {
            Architecture::LinearSoftmax => vec![(actions, d)],
            Architecture::MlpSoftmax { hidden } => {
                let mut dims = Vec::with_capacity(hidden.len() + 1);
                let mut input = d;
                for &h in hidden {
                    dims.push((h, input));
                    input = h;
                }
                dims.push((actions, input));
                dims
            }
        }
    }

    pub fn param_count(&self, d: usize, actions: usize) -> usize {
        self.layer_dims(d, actions).iter().map(|&(o, i)| o * i + o).sum()
    }
}

/// Softmax policy with a flat parameter vector.
///
/// Each layer stores its weight matrix row-major (`out x in`) followed by its
/// bias. For the linear architecture row `a` of the weight matrix is the
/// logit direction of action `a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub architecture: Architecture,
    pub feature_dim: usize,
    pub action_count: usize,
    pub params: Vec<f64>,
    pub init_seed: u64,
}

impl PolicyParams {
    pub fn zeros(architecture: Architecture, feature_dim: usize, action_count: usize) -> Self {
        let n = architecture.param_count(feature_dim, action_count);
        PolicyParams {
            architecture,
            feature_dim,
            action_count,
            params: vec![0.0; n],
            init_seed: 0,
        }
    }

    /// Small uniform parameters in [-0.01, 0.01].
    pub fn init(architecture: Architecture, feature_dim: usize, action_count: usize, init_seed: u64) -> Self {
        Self::init_scaled(architecture, feature_dim, action_count, init_seed, 0.01)
    }

    pub fn init_scaled(
        architecture: Architecture,
        feature_dim: usize,
        action_count: usize,
        init_seed: u64,
        scale: f64,
    ) -> Self {
        let mut p = Self::zeros(architecture, feature_dim, action_count);
        let mut rng = seed::rng(init_seed);
        for v in &mut p.params {
            *v = rng.random_range(-scale..=scale);
        }
        p.init_seed = init_seed;
        p
    }

    pub fn from_vec(
        architecture: Architecture,
        feature_dim: usize,
        action_count: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        let expected = architecture.param_count(feature_dim, action_count);
        if params.len() != expected {
            return Err(Error::InvalidInput(format!(
                "expected {expected} parameters, got {}",
                params.len()
            )));
        }
        Ok(PolicyParams {
            architecture,
            feature_dim,
            action_count,
            params,
            init_seed: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    fn layers(&self) -> Vec<(usize, usize, usize)> {
        let mut offset = 0;
        self.architecture
            .layer_dims(self.feature_dim, self.action_count)
            .into_iter()
            .map(|(o, i)| {
                let start = offset;
                offset += o * i + o;
                (o, i, start)
            })
            .collect()
    }

    /// Weight matrix rows of the linear architecture.
    pub fn linear_rows(&self) -> Option<Vec<&[f64]>> {
        match self.architecture {
            Architecture::LinearSoftmax => {
                let d = self.feature_dim;
                Some(
                    (0..self.action_count)
                        .map(|a| &self.params[a * d..(a + 1) * d])
                        .collect(),
                )
            }
            Architecture::MlpSoftmax { .. } => None,
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.feature_dim {
            return Err(Error::InvalidInput(format!(
                "context has dimension {}, policy expects {}",
                x.len(),
                self.feature_dim
            )));
        }
        Ok(())
    }

    /// Forward pass returning the activations of every layer (input first,
    /// logits last).
    fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut acts = Vec::with_capacity(layers.len() + 1);
        acts.push(x.to_vec());
        for (l, &(o, i, start)) in layers.iter().enumerate() {
            let input = &acts[l];
            let w = &self.params[start..start + o * i];
            let b = &self.params[start + o * i..start + o * i + o];
            let mut out: Vec<f64> = (0..o)
                .map(|r| b[r] + w[r * i..(r + 1) * i].iter().zip(input).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            if l != last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(out);
        }
        acts
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let z = self.forward(x).pop().expect("at least one layer");
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy logits".into()));
        }
        Ok(z)
    }

    /// Accumulate `J^T dlogits` into `grad`, where `J` is the Jacobian of
    /// the logits with respect to the parameters at `x`.
    pub fn backward(&self, x: &[f64], dlogits: &[f64], grad: &mut [f64]) {
        let layers = self.layers();
        if let Architecture::LinearSoftmax = self.architecture {
            let (o, i, start) = layers[0];
            for a in 0..o {
                let g = dlogits[a];
                if g == 0.0 {
                    continue;
                }
                let row = &mut grad[start + a * i..start + (a + 1) * i];
                row.iter_mut().zip(x).for_each(|(r, xv)| *r += g * xv);
                grad[start + o * i + a] += g;
            }
            return;
        }
        let acts = self.forward(x);
        let mut delta = dlogits.to_vec();
        for l in (0..layers.len()).rev() {
            let (o, i, start) = layers[l];
            let input = &acts[l];
            for r in 0..o {
                let g = delta[r];
                if g == 0.0 {
                    continue;
                }
                for c in 0..i {
                    grad[start + r * i + c] += g * input[c];
                }
                grad[start + o * i + r] += g;
            }
            if l > 0 {
                let w = &self.params[start..start + o * i];
                let mut prev = vec![0.0; i];
                for r in 0..o {
                    let g = delta[r];
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..i {
                        prev[c] += g * w[r * i + c];
                    }
                }
                // tanh'(u) = 1 - tanh(u)^2, and acts[l] holds tanh(u).
                for (p, h) in prev.iter_mut().zip(&acts[l]) {
                    *p *= 1.0 - h * h;
                }
                delta = prev;
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>, metadata: serde_json::Value) -> Result<()> {
        let file = PolicyFile {
            format: POLICY_FORMAT.to_string(),
            version: POLICY_VERSION,
            policy: self.clone(),
            metadata,
        };
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&file)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PolicyFile> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: PolicyFile = serde_json::from_str(&text)?;
        if file.format != POLICY_FORMAT || file.version != POLICY_VERSION {
            return Err(Error::Unsupported(format!(
                "policy file {} has format {} v{}",
                path.display(),
                file.format,
                file.version
            )));
        }
        let expected = file
            .policy
            .architecture
            .param_count(file.policy.feature_dim, file.policy.action_count);
        if file.policy.params.len() != expected {
            return Err(Error::InvalidInput(format!(
                "policy file {} has {} parameters, expected {expected}",
                path.display(),
                file.policy.params.len()
            )));
        }
        Ok(file)
    }
}

impl Policy for PolicyParams {
    fn action_count(&self) -> usize {
        self.action_count
    }

    fn action_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x)?))
    }
}

pub const POLICY_FORMAT: &str = "poela-policy";
pub const POLICY_VERSION: u32 = 1;

/// Versioned on-disk policy checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub format: String,
    pub version: u32,
    pub policy: PolicyParams,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Softmax restricted to the allowed actions; exact zeros elsewhere.
pub fn masked_softmax(z: &[f64], mask: &[bool]) -> Vec<f64> {
    let m = z
        .iter()
        .zip(mask)
        .filter(|(_, &ok)| ok)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z
        .iter()
        .zip(mask)
        .map(|(v, &ok)| if ok { (v - m).exp() } else { 0.0 })
        .collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

static DEGENERATE_RENORMALIZATIONS: AtomicU64 = AtomicU64::new(0);

/// Number of renormalizations so far that found zero allowed mass and fell
/// back to the uniform distribution over the mask.
pub fn degenerate_renormalizations() -> u64 {
    DEGENERATE_RENORMALIZATIONS.load(Ordering::Relaxed)
}

/// Zero out disallowed actions and renormalize over the allowed ones.
pub fn mask_renormalize(probs: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if probs.len() != mask.len() {
        return Err(Error::InvalidInput("probability and mask lengths differ".into()));
    }
    let allowed = mask.iter().filter(|&&m| m).count();
    if allowed == 0 {
        return Err(Error::InvalidInput("mask has no allowed action".into()));
    }
    if mask.iter().all(|&m| m) {
        return Ok(probs.to_vec());
    }
    let mass: f64 = probs.iter().zip(mask).filter(|(_, &m)| m).map(|(p, _)| p).sum();
    if mass == 0.0 {
        DEGENERATE_RENORMALIZATIONS.fetch_add(1, Ordering::Relaxed);
        log::warn!("allowed probability mass is zero, using uniform over {allowed} actions");
        let u = 1.0 / allowed as f64;
        return Ok(mask.iter().map(|&m| if m { u } else { 0.0 }).collect());
    }
    Ok(probs
        .iter()
        .zip(mask)
        .map(|(p, &m)| if m { p / mass } else { 0.0 })
        .collect())
}

/// Source of per-context action masks for policies evaluated away from the
/// training samples (validation data, environment rollouts).
pub trait MaskOracle: Send + Sync {
    /// Allowed actions at `x`. An all-false vector means "no information".
    fn mask(&self, x: &[f64]) -> Vec<bool>;
}

/// A base policy renormalized on masks from a [`MaskOracle`]. Where the
/// oracle allows nothing the base distribution is used unchanged.
#[derive(Clone)]
pub struct MaskedPolicy<P> {
    pub base: P,
    pub oracle: Arc<dyn MaskOracle>,
}

impl<P: Policy> MaskedPolicy<P> {
    pub fn new(base: P, oracle: Arc<dyn MaskOracle>) -> Self {
        MaskedPolicy { base, oracle }
    }
}

impl<P: Policy> Policy for MaskedPolicy<P> {
    fn action_count(&self) -> usize {
        self.base.action_count()
    }

    fn action_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        let probs = self.base.action_probs(x)?;
        let mask = self.oracle.mask(x);
        if !mask.iter().any(|&m| m) {
            return Ok(probs);
        }
        mask_renormalize(&probs, &mask)
    }
}

/// A base policy renormalized on precomputed per-sample masks of one dataset.
pub struct MaskedSteps<'a, P> {
    pub base: &'a P,
    pub masks: &'a EligibleMask,
}

impl<P: Policy> StepPolicy for MaskedSteps<'_, P> {
    fn logged_prob(&self, dataset: &Dataset, traj: usize, step: usize) -> Result<f64> {
        if self.masks.fingerprint() != dataset.fingerprint() {
            return Err(Error::InvalidInput("mask was computed for a different dataset".into()));
        }
        let t = dataset.get(traj);
        let probs = self.base.action_probs(&t.contexts[step])?;
        let p = mask_renormalize(&probs, self.masks.get(traj, step))?;
        Ok(p[t.actions[step]])
    }
}

/// Objective `SNTIS - lambda * sqrt(Var)` and its gradient.
#[derive(Debug, Clone)]
pub struct ObjectiveGradient {
    pub objective: f64,
    pub value: f64,
    pub variance: f64,
    pub ess: f64,
    pub gradient: Vec<f64>,
}

/// Analytic gradient of the variance-penalized SNTIS objective of the
/// masked policy.
///
/// Trajectory weights are products of `masked_pi / mu` over steps. At the cap
/// `W >= M` the truncated weight is treated as constant. When the variance
/// estimate is exactly zero the penalty contributes no gradient.
pub fn objective_gradient(
    params: &PolicyParams,
    dataset: &Dataset,
    masks: Option<&EligibleMask>,
    truncation: f64,
    lambda: f64,
) -> Result<ObjectiveGradient> {
    if let Some(m) = masks {
        if m.fingerprint() != dataset.fingerprint() {
            return Err(Error::InvalidInput("mask was computed for a different dataset".into()));
        }
    }
    let actions = params.action_count;
    let n = dataset.len();
    let mut returns = Vec::with_capacity(n);
    let mut full = Vec::with_capacity(n);
    // Per step: (e_a - pi_hat) over the logits.
    let mut dlog: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n);
    for (i, t) in dataset.trajectories().iter().enumerate() {
        let mut w = 1.0;
        let mut per_step = Vec::with_capacity(t.horizon());
        for h in 0..t.horizon() {
            let z = params.logits(&t.contexts[h])?;
            let probs = match masks {
                Some(m) => masked_softmax(&z, m.get(i, h)),
                None => softmax(&z),
            };
            let a = t.actions[h];
            w *= probs[a] / t.behavior_probs[h];
            let mut g: Vec<f64> = probs.iter().map(|p| -p).collect();
            g[a] += 1.0;
            if let Some(m) = masks {
                for (gv, &ok) in g.iter_mut().zip(m.get(i, h)) {
                    if !ok {
                        *gv = 0.0;
                    }
                }
            }
            debug_assert_eq!(g.len(), actions);
            per_step.push(g);
        }
        if !w.is_finite() {
            return Err(Error::NonFinite(format!("weight of trajectory {i}")));
        }
        full.push(w);
        returns.push(t.total_reward());
        dlog.push(per_step);
    }

    let trunc: Vec<f64> = full.iter().map(|&w| w.min(truncation)).collect();
    let sw: f64 = trunc.iter().sum();
    if !(sw > 0.0) {
        return Err(Error::NoOverlap);
    }
    let value = returns.iter().zip(&trunc).map(|(r, w)| r * w).sum::<f64>() / sw;
    let q: f64 = returns
        .iter()
        .zip(&trunc)
        .map(|(r, w)| (r - value).powi(2) * w * w)
        .sum();
    let variance = q / (sw * sw);
    let sum_sq: f64 = trunc.iter().map(|w| w * w).sum();
    let ess = sw * sw / sum_sq;
    let sd = variance.sqrt();
    let objective = value - lambda * sd;

    // d(objective)/d(truncated weight i)
    let a_sum: f64 = returns.iter().zip(&trunc).map(|(r, w)| (r - value) * w * w).sum();
    let penalty_scale = if lambda != 0.0 && sd > 0.0 {
        lambda / (2.0 * sd)
    } else {
        0.0
    };
    let mut gradient = vec![0.0; params.len()];
    for i in 0..n {
        if !(full[i] < truncation) || full[i] == 0.0 {
            continue;
        }
        let res = returns[i] - value;
        let dv = res / sw;
        let dq = -2.0 * a_sum * res / sw + 2.0 * res * res * trunc[i];
        let dvar = dq / (sw * sw) - 2.0 * q / (sw * sw * sw);
        let coef = dv - penalty_scale * dvar;
        let scale = coef * full[i];
        if scale == 0.0 {
            continue;
        }
        let t = dataset.get(i);
        for (h, g) in dlog[i].iter().enumerate() {
            let dz: Vec<f64> = g.iter().map(|v| v * scale).collect();
            params.backward(&t.contexts[h], &dz, &mut gradient);
        }
    }
    if gradient.iter().any(|g| !g.is_finite()) || !objective.is_finite() {
        return Err(Error::NonFinite("objective gradient".into()));
    }
    Ok(ObjectiveGradient {
        objective,
        value,
        variance,
        ess,
        gradient,
    })
}

/// Lipschitz constant of `x -> pi(a|x)` (max over actions, Euclidean norm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LipschitzBound {
    Certified {
        value: f64,
    },
    /// No certified bound; the product of layer operator norms (estimated by
    /// power iteration) is reported for reference.
    Uncertified {
        operator_norm_bound: f64,
    },
}

impl LipschitzBound {
    pub fn certified(&self) -> Option<f64> {
        match *self {
            LipschitzBound::Certified { value } => Some(value),
            LipschitzBound::Uncertified { .. } => None,
        }
    }
}

/// For a linear softmax, `|d pi_a| <= pi_a (1 - pi_a) max_b |d(z_a - z_b)|`,
/// so `L = 1/2 * max_{a,a'} ||theta_a - theta_a'||` is a valid (conservative)
/// bound. Restricting to `allowed` bounds the mask-renormalized policy for a
/// fixed mask.
pub fn lipschitz_bound(params: &PolicyParams) -> LipschitzBound {
    lipschitz_bound_on(params, &vec![true; params.action_count])
}

pub fn lipschitz_bound_on(params: &PolicyParams, allowed: &[bool]) -> LipschitzBound {
    let max_pair = |rows: &[Vec<f64>]| {
        let mut best: f64 = 0.0;
        for a in 0..rows.len() {
            for b in a + 1..rows.len() {
                if !(allowed[a] && allowed[b]) {
                    continue;
                }
                let d: f64 = rows[a].iter().zip(&rows[b]).map(|(x, y)| (x - y).powi(2)).sum();
                best = best.max(d.sqrt());
            }
        }
        best
    };
    match &params.architecture {
        Architecture::LinearSoftmax => {
            let rows: Vec<Vec<f64>> = params
                .linear_rows()
                .expect("linear")
                .into_iter()
                .map(<[f64]>::to_vec)
                .collect();
            LipschitzBound::Certified {
                value: 0.5 * max_pair(&rows),
            }
        }
        Architecture::MlpSoftmax { .. } => {
            let layers = params.layers();
            let (last_o, last_i, last_start) = *layers.last().expect("head");
            let head: Vec<Vec<f64>> = (0..last_o)
                .map(|r| params.params[last_start + r * last_i..last_start + (r + 1) * last_i].to_vec())
                .collect();
            let mut bound = 0.5 * max_pair(&head);
            for &(o, i, start) in &layers[..layers.len() - 1] {
                bound *= spectral_norm(&params.params[start..start + o * i], o, i);
            }
            LipschitzBound::Uncertified {
                operator_norm_bound: bound,
            }
        }
    }
}

fn spectral_norm(w: &[f64], rows: usize, cols: usize) -> f64 {
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut sigma = 0.0;
    for _ in 0..100 {
        let u: Vec<f64> = (0..rows)
            .map(|r| w[r * cols..(r + 1) * cols].iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        let mut next = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                next[c] += w[r * cols + c] * u[r];
            }
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        sigma = norm.sqrt();
        v = next.into_iter().map(|x| x / norm).collect();
    }
    sigma
}
