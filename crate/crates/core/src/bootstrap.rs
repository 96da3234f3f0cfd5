//! Bias-corrected and accelerated (BCa) bootstrap intervals with the
//! trajectory as the resampling unit.

use libm::erfc;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{compute_weights, is_value_from, sntis_value_from, EstimatorTag, WeightTable};
use crate::policy::StepPolicy;
use crate::seed;

pub const DEFAULT_RESAMPLES: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    #[serde(default = "default_resamples")]
    pub resamples: usize,
    /// Two-sided miscoverage; 0.05 gives a 95% interval.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_resamples() -> usize {
    DEFAULT_RESAMPLES
}

fn default_alpha() -> f64 {
    0.05
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            resamples: DEFAULT_RESAMPLES,
            alpha: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub resamples: usize,
    pub alpha: f64,
    pub z0: f64,
    pub acceleration: f64,
    pub seed: u64,
    /// Resamples on which the statistic was undefined (no overlap).
    pub dropped: usize,
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile: Acklam's rational approximation refined by one
/// Halley step.
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    // The lower tail keeps the Halley residual free of cancellation.
    if p > 0.5 {
        return -normal_quantile(1.0 - p);
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.38357751867269e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    x - u / (1.0 + x * u / 2.0)
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Trajectory indices of resample `b`.
pub fn resample_indices(master_seed: u64, b: usize, n: usize) -> Vec<usize> {
    let mut rng = seed::rng(seed::derive(master_seed, b as u64));
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Overrides for the bias correction and acceleration (testing hook).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Forced {
    pub z0: Option<f64>,
    pub acceleration: Option<f64>,
}

/// BCa interval of `statistic` over `n` exchangeable units. The statistic
/// gets the (possibly repeated) unit indices of a resample and returns
/// `Ok(None)` when it is undefined there.
pub fn bca<F>(n: usize, statistic: F, config: &BootstrapConfig, forced: Forced) -> Result<BootstrapResult>
where
    F: Fn(&[usize]) -> Result<Option<f64>> + Sync,
{
    if config.resamples < 100 {
        return Err(Error::InvalidInput(format!(
            "need at least 100 resamples, got {}",
            config.resamples
        )));
    }
    if !(config.alpha > 0.0 && config.alpha < 0.5) {
        return Err(Error::InvalidInput(format!(
            "alpha must be in (0, 0.5), got {}",
            config.alpha
        )));
    }
    if n < 2 {
        return Err(Error::InvalidInput("need at least two units to bootstrap".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let point = statistic(&all)?.ok_or(Error::NoOverlap)?;

    let stats: Vec<Option<f64>> = (0..config.resamples)
        .into_par_iter()
        .map(|b| statistic(&resample_indices(config.seed, b, n)))
        .collect::<Result<_>>()?;
    let mut valid: Vec<f64> = stats.into_iter().flatten().collect();
    let dropped = config.resamples - valid.len();
    if 2 * dropped > config.resamples {
        return Err(Error::BootstrapUnstable {
            dropped,
            total: config.resamples,
        });
    }
    if dropped > 0 {
        log::warn!("{dropped} of {} bootstrap resamples had no overlap", config.resamples);
    }
    valid.sort_by(f64::total_cmp);
    let b = valid.len() as f64;

    let z0 = match forced.z0 {
        Some(z) => z,
        None if valid[0] == valid[valid.len() - 1] => 0.0,
        None => {
            let below = valid.iter().filter(|&&s| s < point).count() as f64;
            // Keep the fraction off {0, 1} so z0 stays finite.
            normal_quantile((below / b).clamp(0.5 / b, 1.0 - 0.5 / b))
        }
    };
    let acceleration = match forced.acceleration {
        Some(a) => a,
        None => jackknife_acceleration(n, &statistic)?,
    };

    let (p_lo, p_hi) = if z0 == 0.0 && acceleration == 0.0 {
        (config.alpha / 2.0, 1.0 - config.alpha / 2.0)
    } else {
        let adjust = |z: f64| normal_cdf(z0 + (z0 + z) / (1.0 - acceleration * (z0 + z)));
        (
            adjust(normal_quantile(config.alpha / 2.0)),
            adjust(normal_quantile(1.0 - config.alpha / 2.0)),
        )
    };
    Ok(BootstrapResult {
        point,
        lower: quantile_sorted(&valid, p_lo),
        upper: quantile_sorted(&valid, p_hi),
        resamples: config.resamples,
        alpha: config.alpha,
        z0,
        acceleration,
        seed: config.seed,
        dropped,
    })
}

fn jackknife_acceleration<F>(n: usize, statistic: &F) -> Result<f64>
where
    F: Fn(&[usize]) -> Result<Option<f64>> + Sync,
{
    let loo: Vec<Option<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let idx: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            statistic(&idx)
        })
        .collect::<Result<_>>()?;
    let loo: Vec<f64> = loo.into_iter().flatten().collect();
    if loo.is_empty() {
        return Ok(0.0);
    }
    let mean = loo.iter().sum::<f64>() / loo.len() as f64;
    let (mut s2, mut s3) = (0.0, 0.0);
    for v in &loo {
        let d = mean - v;
        s2 += d * d;
        s3 += d * d * d;
    }
    if s2 == 0.0 {
        return Ok(0.0);
    }
    Ok(s3 / (6.0 * s2.powf(1.5)))
}

/// Estimate from a subset of per-trajectory (return, weight) pairs.
fn weighted_statistic(tag: EstimatorTag, returns: &[f64], weights: &WeightTable, idx: &[usize]) -> Result<Option<f64>> {
    let r: Vec<f64> = idx.iter().map(|&i| returns[i]).collect();
    let full: Vec<f64> = idx.iter().map(|&i| weights.full[i]).collect();
    let sub = WeightTable::from_weights(full, weights.truncation);
    let out = match tag {
        EstimatorTag::Is => is_value_from(&sub, &r),
        EstimatorTag::Snis | EstimatorTag::Sntis => sntis_value_from(&sub, &r),
    };
    match out {
        Ok(e) => Ok(Some(e.value)),
        Err(Error::NoOverlap) => Ok(None),
        Err(e) => Err(e),
    }
}

/// BCa interval for the value of `policy` on `dataset`.
pub fn bca_interval(
    dataset: &Dataset,
    policy: &(impl StepPolicy + ?Sized),
    tag: EstimatorTag,
    truncation: f64,
    config: &BootstrapConfig,
) -> Result<BootstrapResult> {
    let truncation = if tag == EstimatorTag::Is {
        f64::INFINITY
    } else {
        truncation
    };
    let weights = compute_weights(policy, dataset, truncation)?;
    bca_from_weights(&dataset.returns(), &weights, tag, config)
}

pub fn bca_from_weights(
    returns: &[f64],
    weights: &WeightTable,
    tag: EstimatorTag,
    config: &BootstrapConfig,
) -> Result<BootstrapResult> {
    if returns.len() != weights.len() {
        return Err(Error::InvalidInput("returns and weights differ in length".into()));
    }
    bca(
        returns.len(),
        |idx| weighted_statistic(tag, returns, weights, idx),
        config,
        Forced::default(),
    )
}
