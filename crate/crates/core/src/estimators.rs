//! Importance weights and the IS / SNIS / SNTIS estimators.
//!
//! For trajectory `i` the step weight is `W_h = pi(a_h|x_h) / mu(a_h|x_h)`,
//! the trajectory weight is the product over steps and the truncated weight
//! is `min(W, M)`. Returns are undiscounted sums of rewards.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::policy::StepPolicy;
use crate::serde_util::maybe_inf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EstimatorTag {
    Is,
    Snis,
    Sntis,
}

/// Per-trajectory importance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    pub step_weights: Vec<Vec<f64>>,
    pub cumulative: Vec<Vec<f64>>,
    pub full: Vec<f64>,
    pub truncated: Vec<f64>,
    pub truncation: f64,
}

impl WeightTable {
    pub fn len(&self) -> usize {
        self.full.len()
    }

    pub fn is_empty(&self) -> bool {
        self.full.is_empty()
    }

    /// Table from bare trajectory weights (single-step view).
    pub fn from_weights(full: Vec<f64>, truncation: f64) -> Self {
        let truncated = full.iter().map(|&w| w.min(truncation)).collect();
        WeightTable {
            step_weights: full.iter().map(|&w| vec![w]).collect(),
            cumulative: full.iter().map(|&w| vec![w]).collect(),
            full,
            truncated,
            truncation,
        }
    }

    pub fn truncated_sum(&self) -> f64 {
        self.truncated.iter().sum()
    }
}

/// The unit of evaluation output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub variance: f64,
    pub ess: f64,
    pub n: usize,
    #[serde(rename = "M", with = "maybe_inf")]
    pub truncation: f64,
    pub tag: EstimatorTag,
}

fn check_truncation(m: f64) -> Result<()> {
    if !(m > 0.0) {
        return Err(Error::InvalidInput(format!("truncation M must be > 0, got {m}")));
    }
    Ok(())
}

pub fn compute_weights(policy: &(impl StepPolicy + ?Sized), dataset: &Dataset, truncation: f64) -> Result<WeightTable> {
    check_truncation(truncation)?;
    let n = dataset.len();
    let mut step_weights = Vec::with_capacity(n);
    let mut cumulative = Vec::with_capacity(n);
    let mut full = Vec::with_capacity(n);
    for (i, t) in dataset.trajectories().iter().enumerate() {
        let mut steps = Vec::with_capacity(t.horizon());
        let mut cum = Vec::with_capacity(t.horizon());
        let mut acc = 1.0;
        for h in 0..t.horizon() {
            let p = policy.logged_prob(dataset, i, h)?;
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidProbability {
                    action: t.actions[h],
                    value: p,
                });
            }
            let w = p / t.behavior_probs[h];
            if !w.is_finite() {
                return Err(Error::NonFinite(format!("step weight ({i}, {h})")));
            }
            acc *= w;
            steps.push(w);
            cum.push(acc);
        }
        if !acc.is_finite() {
            return Err(Error::NonFinite(format!("weight of trajectory {i}")));
        }
        step_weights.push(steps);
        cumulative.push(cum);
        full.push(acc);
    }
    let truncated = full.iter().map(|&w| w.min(truncation)).collect();
    Ok(WeightTable {
        step_weights,
        cumulative,
        full,
        truncated,
        truncation,
    })
}

fn check_sizes(weights: &WeightTable, returns: &[f64]) -> Result<()> {
    if weights.len() != returns.len() {
        return Err(Error::InvalidInput(format!(
            "weight table has {} trajectories, dataset has {}",
            weights.len(),
            returns.len()
        )));
    }
    Ok(())
}

fn ess_of(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|v| v * v).sum();
    if s2 == 0.0 {
        0.0
    } else {
        s * s / s2
    }
}

/// `(sum w)^2 / sum w^2` over truncated weights; 0 when every weight is 0.
pub fn ess(weights: &WeightTable) -> f64 {
    ess_of(&weights.truncated)
}

/// Ordinary importance sampling, `mean(r_i W_i)`, from untruncated weights.
pub fn is_value(weights: &WeightTable, dataset: &Dataset) -> Result<Estimate> {
    is_value_from(weights, &dataset.returns())
}

pub fn is_value_from(weights: &WeightTable, returns: &[f64]) -> Result<Estimate> {
    check_sizes(weights, returns)?;
    let n = returns.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let terms: Vec<f64> = returns.iter().zip(&weights.full).map(|(r, w)| r * w).collect();
    let value = terms.iter().sum::<f64>() / n as f64;
    let variance = if n > 1 {
        terms.iter().map(|t| (t - value).powi(2)).sum::<f64>() / ((n - 1) as f64 * n as f64)
    } else {
        0.0
    };
    Ok(Estimate {
        value,
        variance,
        ess: ess_of(&weights.full),
        n,
        truncation: f64::INFINITY,
        tag: EstimatorTag::Is,
    })
}

/// Self-normalized truncated IS; tagged SNIS when `M = inf`.
pub fn sntis_value(weights: &WeightTable, dataset: &Dataset) -> Result<Estimate> {
    sntis_value_from(weights, &dataset.returns())
}

pub fn sntis_value_from(weights: &WeightTable, returns: &[f64]) -> Result<Estimate> {
    check_sizes(weights, returns)?;
    let sw = weights.truncated_sum();
    if !(sw > 0.0) {
        return Err(Error::NoOverlap);
    }
    let value = returns.iter().zip(&weights.truncated).map(|(r, w)| r * w).sum::<f64>() / sw;
    let variance = sntis_variance_from(weights, returns, value)?;
    Ok(Estimate {
        value,
        variance,
        ess: ess(weights),
        n: returns.len(),
        truncation: weights.truncation,
        tag: if weights.truncation.is_infinite() {
            EstimatorTag::Snis
        } else {
            EstimatorTag::Sntis
        },
    })
}

/// Normal-approximation variance of the self-normalized estimate:
/// `sum (r_i - v)^2 w_i^2 / (sum w_i)^2` on truncated weights.
pub fn sntis_variance(weights: &WeightTable, dataset: &Dataset, value: f64) -> Result<f64> {
    sntis_variance_from(weights, &dataset.returns(), value)
}

pub fn sntis_variance_from(weights: &WeightTable, returns: &[f64], value: f64) -> Result<f64> {
    check_sizes(weights, returns)?;
    let sw = weights.truncated_sum();
    if !(sw > 0.0) {
        return Err(Error::NoOverlap);
    }
    let q: f64 = returns
        .iter()
        .zip(&weights.truncated)
        .map(|(r, w)| (r - value).powi(2) * w * w)
        .sum();
    Ok(q / (sw * sw))
}

/// Share of truncated weight carried by trajectories with return at or
/// below `threshold`.
pub fn low_reward_weight_mass(weights: &WeightTable, dataset: &Dataset, threshold: f64) -> Result<f64> {
    let returns = dataset.returns();
    check_sizes(weights, &returns)?;
    let sw = weights.truncated_sum();
    if !(sw > 0.0) {
        return Err(Error::NoOverlap);
    }
    let low: f64 = returns
        .iter()
        .zip(&weights.truncated)
        .filter(|(r, _)| **r <= threshold)
        .map(|(_, w)| w)
        .sum();
    Ok(low / sw)
}

/// The three-term split of the self-normalized (untruncated) estimate over
/// discrete initial contexts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// `E_p_hat[v(x)]`.
    pub empirical_v: f64,
    /// `sum_x (W(x) - p_hat(x)) v(x)`, signed so the three terms add up to
    /// the estimate.
    pub context_shift: f64,
    /// `sum_x W(x) (weighted mean return in x - v(x))`.
    pub per_context_error: f64,
    pub snis_value: f64,
    pub contexts: usize,
}

impl Decomposition {
    pub fn total(&self) -> f64 {
        self.empirical_v + self.context_shift + self.per_context_error
    }
}

fn context_key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

/// Decompose the SNIS estimate of `policy` by initial context.
///
/// `oracle` returns the true `v^pi(x)` for an initial context, or `None` when
/// the context lies outside the finite context set it knows about.
pub fn decompose(
    policy: &(impl StepPolicy + ?Sized),
    dataset: &Dataset,
    oracle: impl Fn(&[f64]) -> Option<f64>,
) -> Result<Decomposition> {
    let weights = compute_weights(policy, dataset, f64::INFINITY)?;
    let n = dataset.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let total_w: f64 = weights.full.iter().sum();
    if !(total_w > 0.0) {
        return Err(Error::NoOverlap);
    }
    // context -> (count, weight sum, weighted return sum, v)
    let mut groups: BTreeMap<Vec<u64>, (usize, f64, f64, f64)> = BTreeMap::new();
    for (i, t) in dataset.trajectories().iter().enumerate() {
        let x = t.initial_context();
        let key = context_key(x);
        let entry = match groups.get_mut(&key) {
            Some(e) => e,
            None => {
                let v = oracle(x).ok_or_else(|| {
                    Error::Unsupported(format!(
                        "no oracle value for initial context of trajectory {i}; decomposition needs discrete contexts"
                    ))
                })?;
                groups.entry(key).or_insert((0, 0.0, 0.0, v))
            }
        };
        entry.0 += 1;
        entry.1 += weights.full[i];
        entry.2 += weights.full[i] * t.total_reward();
    }
    let mut empirical_v = 0.0;
    let mut context_shift = 0.0;
    let mut per_context_error = 0.0;
    for &(count, wsum, wr, v) in groups.values() {
        let p_hat = count as f64 / n as f64;
        let w_x = wsum / total_w;
        empirical_v += p_hat * v;
        context_shift += (w_x - p_hat) * v;
        if wsum > 0.0 {
            per_context_error += w_x * (wr / wsum - v);
        }
    }
    let snis_value = dataset
        .returns()
        .iter()
        .zip(&weights.full)
        .map(|(r, w)| r * w)
        .sum::<f64>()
        / total_w;
    Ok(Decomposition {
        empirical_v,
        context_shift,
        per_context_error,
        snis_value,
        contexts: groups.len(),
    })
}
