//! Logged trajectories, datasets, splits and the `.ds.jsonl` file format.
//!
//! A dataset file is UTF-8 text with one JSON record per line. The first line
//! is an optional header `{"dataset": {...}}` carrying the dataset-level
//! metadata; every following line is one trajectory:
//!
//! ```text
//! {"dataset":{"feature_dim":2,"action_count":3,"r_max":5.0,"h_max":2,"provenance":"..."}}
//! {"contexts":[[0.0,1.0],[0.5,0.5]],"actions":[2,0],"rewards":[0.0,-1.0],"behavior_probs":[0.5,0.25]}
//! ```
//!
//! Numbers are written in shortest round-trip form, so save → load → save is
//! byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed;

/// One logged episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub contexts: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Behavior propensity of the logged action at each step.
    pub behavior_probs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    /// Undiscounted return.
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn initial_context(&self) -> &[f64] {
        &self.contexts[0]
    }

    fn validate(&self, index: usize, info: &DatasetInfo) -> Result<()> {
        let bad = |field: &'static str, message: String| Error::InvalidTrajectory {
            trajectory: index,
            field,
            message,
        };
        let h = self.actions.len();
        if h == 0 {
            return Err(bad("actions", "horizon must be positive".into()));
        }
        if self.contexts.len() != h || self.rewards.len() != h || self.behavior_probs.len() != h {
            return Err(bad(
                "lengths",
                format!(
                    "mismatched lengths: {} contexts, {} actions, {} rewards, {} behavior_probs",
                    self.contexts.len(),
                    h,
                    self.rewards.len(),
                    self.behavior_probs.len()
                ),
            ));
        }
        if h > info.h_max {
            return Err(bad("actions", format!("horizon {h} exceeds h_max {}", info.h_max)));
        }
        for (step, x) in self.contexts.iter().enumerate() {
            if x.len() != info.feature_dim {
                return Err(bad(
                    "contexts",
                    format!("step {step} has dimension {}, expected {}", x.len(), info.feature_dim),
                ));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(bad("contexts", format!("step {step} has a non-finite entry")));
            }
        }
        for (step, &a) in self.actions.iter().enumerate() {
            if a >= info.action_count {
                return Err(bad(
                    "actions",
                    format!("step {step}: action {a} out of range for {} actions", info.action_count),
                ));
            }
        }
        for (step, &r) in self.rewards.iter().enumerate() {
            if !r.is_finite() || r.abs() > info.r_max {
                return Err(bad(
                    "rewards",
                    format!("step {step}: reward {r} outside [-{0}, {0}]", info.r_max),
                ));
            }
        }
        for (step, &p) in self.behavior_probs.iter().enumerate() {
            if !(p > 0.0) {
                return Err(bad(
                    "behavior_probs",
                    format!("behavior_probs must be > 0 (step {step} has {p})"),
                ));
            }
            if p > 1.0 {
                return Err(bad(
                    "behavior_probs",
                    format!("behavior_probs must be <= 1 (step {step} has {p})"),
                ));
            }
        }
        Ok(())
    }
}

/// Dataset-level metadata shared by every trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub feature_dim: usize,
    pub action_count: usize,
    pub r_max: f64,
    pub h_max: usize,
    #[serde(default)]
    pub provenance: String,
}

impl DatasetInfo {
    /// Smallest metadata consistent with `trajectories`.
    pub fn infer(trajectories: &[Trajectory], action_count: usize, provenance: impl Into<String>) -> Self {
        let feature_dim = trajectories
            .first()
            .and_then(|t| t.contexts.first())
            .map_or(0, Vec::len);
        let r_max = trajectories
            .iter()
            .flat_map(|t| t.rewards.iter())
            .fold(0.0_f64, |m, r| m.max(r.abs()));
        let h_max = trajectories.iter().map(Trajectory::horizon).max().unwrap_or(0);
        let action_count = trajectories
            .iter()
            .flat_map(|t| t.actions.iter())
            .map(|&a| a + 1)
            .fold(action_count, usize::max);
        DatasetInfo {
            feature_dim,
            action_count,
            r_max,
            h_max,
            provenance: provenance.into(),
        }
    }
}

#[derive(Debug)]
struct Inner {
    info: DatasetInfo,
    trajectories: Vec<Trajectory>,
    fingerprint: OnceLock<String>,
}

/// Immutable collection of trajectories. Cloning is cheap.
#[derive(Debug, Clone)]
pub struct Dataset {
    inner: Arc<Inner>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dataset: DatasetInfo,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>, info: DatasetInfo) -> Result<Self> {
        if info.action_count == 0 {
            return Err(Error::InvalidInput("action_count must be positive".into()));
        }
        if !(info.r_max >= 0.0) {
            return Err(Error::InvalidInput("r_max must be nonnegative".into()));
        }
        for (i, t) in trajectories.iter().enumerate() {
            t.validate(i, &info)?;
        }
        Ok(Dataset {
            inner: Arc::new(Inner {
                info,
                trajectories,
                fingerprint: OnceLock::new(),
            }),
        })
    }

    /// Build with metadata inferred from the trajectories.
    pub fn from_trajectories(
        trajectories: Vec<Trajectory>,
        action_count: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let info = DatasetInfo::infer(&trajectories, action_count, provenance);
        Self::new(trajectories, info)
    }

    pub fn info(&self) -> &DatasetInfo {
        &self.inner.info
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.inner.trajectories
    }

    pub fn get(&self, i: usize) -> &Trajectory {
        &self.inner.trajectories[i]
    }

    pub fn len(&self) -> usize {
        self.inner.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.trajectories.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.inner.info.feature_dim
    }

    pub fn action_count(&self) -> usize {
        self.inner.info.action_count
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories().iter().map(Trajectory::horizon).sum()
    }

    pub fn returns(&self) -> Vec<f64> {
        self.trajectories().iter().map(Trajectory::total_reward).collect()
    }

    /// Subset by trajectory index, in the given order.
    pub fn select(&self, indices: &[usize], provenance: impl Into<String>) -> Dataset {
        let trajectories = indices.iter().map(|&i| self.get(i).clone()).collect();
        let mut info = self.info().clone();
        info.provenance = provenance.into();
        Dataset {
            inner: Arc::new(Inner {
                info,
                trajectories,
                fingerprint: OnceLock::new(),
            }),
        }
    }

    /// Same trajectories with the behavior propensities replaced, e.g. by an
    /// estimated behavior policy.
    pub fn with_behavior_probs(&self, probs: Vec<Vec<f64>>, provenance: impl Into<String>) -> Result<Dataset> {
        if probs.len() != self.len() {
            return Err(Error::InvalidInput(format!(
                "expected propensities for {} trajectories, got {}",
                self.len(),
                probs.len()
            )));
        }
        let trajectories = self
            .trajectories()
            .iter()
            .zip(probs)
            .map(|(t, p)| Trajectory {
                behavior_probs: p,
                ..t.clone()
            })
            .collect();
        let mut info = self.info().clone();
        info.provenance = provenance.into();
        Dataset::new(trajectories, info)
    }

    /// Canonical text serialization.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&Header {
            dataset: self.info().clone(),
        })
        .expect("header serializes");
        out.push('\n');
        for t in self.trajectories() {
            out.push_str(&serde_json::to_string(t).expect("trajectory serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(text: &str, source: &str) -> Result<Self> {
        let mut info: Option<DatasetInfo> = None;
        let mut trajectories = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |e: serde_json::Error| Error::Parse {
                path: source.to_string(),
                line: lineno + 1,
                message: e.to_string(),
            };
            if lineno == 0 && line.starts_with("{\"dataset\"") {
                let header: Header = serde_json::from_str(line).map_err(parse_err)?;
                info = Some(header.dataset);
                continue;
            }
            let t: Trajectory = serde_json::from_str(line).map_err(parse_err)?;
            trajectories.push(t);
        }
        let info = match info {
            Some(info) => info,
            None => DatasetInfo::infer(&trajectories, 1, source),
        };
        Dataset::new(trajectories, info)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_jsonl(&text, &path.display().to_string())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    /// Content hash of the trajectories and metadata (provenance excluded).
    pub fn fingerprint(&self) -> &str {
        self.inner.fingerprint.get_or_init(|| {
            let mut hasher = Sha256::new();
            let mut info = self.info().clone();
            info.provenance.clear();
            hasher.update(serde_json::to_string(&info).expect("info serializes").as_bytes());
            for t in self.trajectories() {
                hasher.update(serde_json::to_string(t).expect("trajectory serializes").as_bytes());
                hasher.update(b"\n");
            }
            hex(&hasher.finalize()[..16])
        })
    }

    pub fn summarize(&self) -> Summary {
        let mut horizon_histogram = BTreeMap::new();
        let mut action_counts = vec![0usize; self.action_count()];
        let mut returns = Vec::with_capacity(self.len());
        let mut min_p: Option<f64> = None;
        let mut max_p: Option<f64> = None;
        for t in self.trajectories() {
            *horizon_histogram.entry(t.horizon()).or_insert(0) += 1;
            for &a in &t.actions {
                action_counts[a] += 1;
            }
            for &p in &t.behavior_probs {
                min_p = Some(min_p.map_or(p, |m| m.min(p)));
                max_p = Some(max_p.map_or(p, |m| m.max(p)));
            }
            returns.push(t.total_reward());
        }
        returns.sort_by(f64::total_cmp);
        let mut return_histogram: Vec<ReturnBin> = Vec::new();
        for r in returns {
            match return_histogram.last_mut() {
                Some(bin) if bin.value == r => bin.count += 1,
                _ => return_histogram.push(ReturnBin { value: r, count: 1 }),
            }
        }
        Summary {
            n: self.len(),
            feature_dim: self.feature_dim(),
            action_count: self.action_count(),
            horizon_histogram,
            return_histogram,
            action_counts,
            min_behavior_prob: min_p,
            max_behavior_prob: max_p,
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnBin {
    pub value: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub feature_dim: usize,
    pub action_count: usize,
    pub horizon_histogram: BTreeMap<usize, usize>,
    /// Distinct returns in increasing order with their counts.
    pub return_histogram: Vec<ReturnBin>,
    pub action_counts: Vec<usize>,
    pub min_behavior_prob: Option<f64>,
    pub max_behavior_prob: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Result<Self> {
        let spec = SplitSpec {
            train_fraction: train,
            val_fraction: val,
            test_fraction: test,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let f = [self.train_fraction, self.val_fraction, self.test_fraction];
        if f.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidInput("split fractions must be nonnegative".into()));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput("split fractions must sum to 1".into()));
        }
        Ok(())
    }
}

/// Trajectory-level partition. Index vectors refer to the source dataset.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

// floor(n * f), tolerant of products like 100 * 0.29 = 28.999999999999996.
fn floor_count(n: usize, fraction: f64) -> usize {
    let x = n as f64 * fraction;
    (x + 1e-9 * x.max(1.0)).floor() as usize
}

/// Shuffle trajectories with `spec.seed`, then carve out validation and test
/// sets of `floor(n * fraction)` trajectories each; the remainder is train.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let n = dataset.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let n_val = floor_count(n, spec.val_fraction);
    let n_test = floor_count(n, spec.test_fraction);
    let n_train = n - n_val - n_test;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(spec.seed));
    let mut train_indices = order[..n_train].to_vec();
    let mut val_indices = order[n_train..n_train + n_val].to_vec();
    let mut test_indices = order[n_train + n_val..].to_vec();
    train_indices.sort_unstable();
    val_indices.sort_unstable();
    test_indices.sort_unstable();
    let base = &dataset.info().provenance;
    Ok(Split {
        train: dataset.select(&train_indices, format!("{base}#train")),
        val: dataset.select(&val_indices, format!("{base}#val")),
        test: dataset.select(&test_indices, format!("{base}#test")),
        train_indices,
        val_indices,
        test_indices,
    })
}
