//! Behavior-policy estimation from logs and overlap masks built from it.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::neighborhood::{EligibleMask, NeighborIndex};
use crate::policy::{MaskOracle, Policy};

/// Where behavior propensities come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum BehaviorSource {
    /// Propensities recorded in the dataset.
    Logged,
    /// k-nearest-neighbor action frequencies over pooled logged contexts.
    Knn { k: usize },
}

/// `μ̂(a|x)` = share of action `a` among the `k` nearest logged contexts.
#[derive(Debug, Clone)]
pub struct KnnBehavior {
    k: usize,
    index: Arc<NeighborIndex>,
}

pub fn knn_behavior(dataset: &Dataset, k: usize) -> Result<KnnBehavior> {
    let index = Arc::new(NeighborIndex::build(dataset)?);
    KnnBehavior::with_index(index, k)
}

impl KnnBehavior {
    pub fn with_index(index: Arc<NeighborIndex>, k: usize) -> Result<Self> {
        if k == 0 || k > index.len() {
            return Err(Error::InvalidInput(format!(
                "k = {k} must be in 1..={} (pooled samples)",
                index.len()
            )));
        }
        Ok(KnnBehavior { k, index })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fingerprint(&self) -> &str {
        self.index.fingerprint()
    }

    /// Neighbor action counts at `x`.
    pub fn counts(&self, x: &[f64]) -> Result<Vec<usize>> {
        let mut counts = vec![0; self.index.action_count()];
        for id in self.index.k_nearest(x, self.k)? {
            counts[self.index.sample(id).action] += 1;
        }
        Ok(counts)
    }
}

impl Policy for KnnBehavior {
    fn action_count(&self) -> usize {
        self.index.action_count()
    }

    fn action_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        let k = self.k as f64;
        Ok(self.counts(x)?.into_iter().map(|c| c as f64 / k).collect())
    }
}

/// Masks allowing `μ̂(a|x) > floor`, plus the logged action so no mask is empty.
pub fn overlap_mask(behavior: &(impl Policy + ?Sized), dataset: &Dataset, floor: f64) -> Result<EligibleMask> {
    if !(floor >= 0.0) {
        return Err(Error::InvalidInput(format!("floor must be >= 0, got {floor}")));
    }
    let rows = dataset
        .trajectories()
        .iter()
        .map(|t| {
            t.contexts
                .iter()
                .zip(&t.actions)
                .map(|(x, &logged)| {
                    let mut m = threshold_mask(behavior, x, floor)?;
                    m[logged] = true;
                    Ok(m)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    EligibleMask::from_rows(dataset, f64::NAN, rows)
}

fn threshold_mask(behavior: &(impl Policy + ?Sized), x: &[f64], floor: f64) -> Result<Vec<bool>> {
    Ok(behavior.action_probs(x)?.into_iter().map(|p| p > floor).collect())
}

/// Query-time rule `μ̂(a|x) > floor` for contexts outside the training log.
pub struct ThresholdOracle<B> {
    pub behavior: B,
    pub floor: f64,
}

impl<B: Policy> MaskOracle for ThresholdOracle<B> {
    fn mask(&self, x: &[f64]) -> Vec<bool> {
        threshold_mask(&self.behavior, x, self.floor).unwrap_or_else(|_| vec![false; self.behavior.action_count()])
    }
}

/// Copy of `dataset` whose recorded propensities are replaced by `μ̂` at the
/// logged actions. Fails if `μ̂` gives a logged action zero probability.
pub fn reweight_dataset(behavior: &(impl Policy + ?Sized), dataset: &Dataset) -> Result<Dataset> {
    let probs = dataset
        .trajectories()
        .iter()
        .map(|t| {
            t.contexts
                .iter()
                .zip(&t.actions)
                .map(|(x, &a)| behavior.action_probs(x).map(|p| p[a]))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let provenance = format!("{} | behavior probabilities estimated", dataset.info().provenance);
    dataset.with_behavior_probs(probs, provenance)
}
