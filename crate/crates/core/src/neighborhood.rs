//! Exact radius and k-nearest-neighbor search over logged contexts, eligible
//! action sets, and per-sample eligibility masks.
//!
//! The index pools every `(context, action)` pair of a dataset across
//! trajectories and time steps. Balls are closed (`dist <= delta`) under the
//! Euclidean distance; membership is decided on squared distances by
//! [`within`], which both the kd-tree and the linear scan use.

use std::collections::{BTreeSet, BinaryHeap};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::envs::{generate_logged_data, BehaviorSpec, Env, EnvBehavior};
use crate::error::{Error, Result};
use crate::policy::{MaskOracle, Policy};
use crate::seed;
use crate::serde_util::maybe_inf;

const LEAF_SIZE: usize = 8;

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Closed-ball membership test shared by every search path.
#[inline]
pub fn within(d2: f64, delta: f64) -> bool {
    d2 <= delta * delta
}

/// A pooled logged sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub action: usize,
    pub traj: usize,
    pub step: usize,
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Kd-tree over the pooled contexts of a dataset.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    dim: usize,
    action_count: usize,
    coords: Vec<f64>,
    samples: Vec<Sample>,
    // Sample ids in tree order; leaves own contiguous ranges.
    order: Vec<usize>,
    nodes: Vec<Node>,
    fingerprint: String,
}

impl NeighborIndex {
    pub fn build(dataset: &Dataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let dim = dataset.feature_dim();
        let mut coords = Vec::with_capacity(dataset.total_steps() * dim);
        let mut samples = Vec::with_capacity(dataset.total_steps());
        for (i, t) in dataset.trajectories().iter().enumerate() {
            for (h, x) in t.contexts.iter().enumerate() {
                if x.len() != dim {
                    return Err(Error::InvalidInput(format!(
                        "trajectory {i} step {h} has dimension {}, expected {dim}",
                        x.len()
                    )));
                }
                coords.extend_from_slice(x);
                samples.push(Sample {
                    action: t.actions[h],
                    traj: i,
                    step: h,
                });
            }
        }
        let mut index = NeighborIndex {
            dim,
            action_count: dataset.action_count(),
            order: (0..samples.len()).collect(),
            coords,
            samples,
            nodes: Vec::new(),
            fingerprint: dataset.fingerprint().to_string(),
        };
        let n = index.samples.len();
        index.build_node(0, n);
        Ok(index)
    }

    fn point(&self, id: usize) -> &[f64] {
        &self.coords[id * self.dim..(id + 1) * self.dim]
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { start, end });
        if end - start <= LEAF_SIZE || self.dim == 0 {
            return id;
        }
        // Split on the axis of largest spread at the median.
        let mut best = (0, 0.0);
        for axis in 0..self.dim {
            let (lo, hi) = self.order[start..end]
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| {
                    let v = self.coords[p * self.dim + axis];
                    (lo.min(v), hi.max(v))
                });
            if hi - lo > best.1 {
                best = (axis, hi - lo);
            }
        }
        if best.1 == 0.0 {
            return id;
        }
        let axis = best.0;
        let mid = start + (end - start) / 2;
        let dim = self.dim;
        let coords = &self.coords;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            coords[a * dim + axis].total_cmp(&coords[b * dim + axis])
        });
        let value = self.coords[self.order[mid] * dim + axis];
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, id: usize) -> Sample {
        self.samples[id]
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn check_query(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::InvalidInput(format!(
                "query has dimension {}, index has {}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Visit every sample id within the closed ball; the visitor returns
    /// `false` to stop early.
    fn visit_ball(&self, x: &[f64], delta: f64, visit: &mut impl FnMut(usize) -> bool) {
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            match self.nodes[n] {
                Node::Leaf { start, end } => {
                    for &p in &self.order[start..end] {
                        if within(squared_distance(x, self.point(p)), delta) && !visit(p) {
                            return;
                        }
                    }
                }
                Node::Split {
                    axis,
                    value,
                    left,
                    right,
                } => {
                    // Points on the far side are at least |diff| away along
                    // `axis`, and that term is part of their squared distance.
                    let diff = x[axis] - value;
                    let far_reachable = within(diff * diff, delta);
                    let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                    if far_reachable {
                        stack.push(far);
                    }
                    stack.push(near);
                }
            }
        }
    }

    /// Sample ids with `dist(x, context) <= delta`, ascending.
    pub fn radius_query(&self, x: &[f64], delta: f64) -> Result<Vec<usize>> {
        self.check_query(x)?;
        check_delta(delta)?;
        let mut out = Vec::new();
        self.visit_ball(x, delta, &mut |p| {
            out.push(p);
            true
        });
        out.sort_unstable();
        Ok(out)
    }

    /// Linear-scan reference for [`radius_query`](Self::radius_query).
    pub fn radius_query_linear(&self, x: &[f64], delta: f64) -> Result<Vec<usize>> {
        self.check_query(x)?;
        check_delta(delta)?;
        Ok((0..self.samples.len())
            .filter(|&p| within(squared_distance(x, self.point(p)), delta))
            .collect())
    }

    /// Eligibility vector over actions: `true` where the action was logged at
    /// some context within `delta` of `x`.
    pub fn eligible_mask(&self, x: &[f64], delta: f64) -> Result<Vec<bool>> {
        self.check_query(x)?;
        check_delta(delta)?;
        let mut mask = vec![false; self.action_count];
        let mut remaining = self.action_count;
        self.visit_ball(x, delta, &mut |p| {
            let a = self.samples[p].action;
            if !mask[a] {
                mask[a] = true;
                remaining -= 1;
            }
            remaining > 0
        });
        Ok(mask)
    }

    pub fn eligible_actions(&self, x: &[f64], delta: f64) -> Result<BTreeSet<usize>> {
        Ok(to_set(&self.eligible_mask(x, delta)?))
    }

    pub fn eligible_actions_linear(&self, x: &[f64], delta: f64) -> Result<BTreeSet<usize>> {
        Ok(self
            .radius_query_linear(x, delta)?
            .into_iter()
            .map(|p| self.samples[p].action)
            .collect())
    }

    /// Per-step variant: only samples logged at time index `step` count.
    /// Not used by the learners, which pool across time.
    pub fn eligible_actions_at_step(&self, x: &[f64], step: usize, delta: f64) -> Result<BTreeSet<usize>> {
        Ok(self
            .radius_query(x, delta)?
            .into_iter()
            .filter(|&p| self.samples[p].step == step)
            .map(|p| self.samples[p].action)
            .collect())
    }

    /// The `k` nearest samples ordered by (distance, pooled sample order).
    pub fn k_nearest(&self, x: &[f64], k: usize) -> Result<Vec<usize>> {
        self.check_query(x)?;
        if k == 0 || k > self.samples.len() {
            return Err(Error::InvalidInput(format!(
                "k = {k} must be in 1..={}",
                self.samples.len()
            )));
        }
        // Max-heap on (d2, id): the top is the current worst of the best k.
        let mut heap: BinaryHeap<(OrdF64, usize)> = BinaryHeap::with_capacity(k + 1);
        // Each entry carries a lower bound on the squared distance to its cell.
        let mut stack = vec![(0usize, 0.0f64)];
        while let Some((n, bound)) = stack.pop() {
            // Ties at the k-th distance must still be explored.
            if heap.len() == k && bound > heap.peek().expect("nonempty").0 .0 {
                continue;
            }
            match self.nodes[n] {
                Node::Leaf { start, end } => {
                    for &p in &self.order[start..end] {
                        let key = (OrdF64(squared_distance(x, self.point(p))), p);
                        if heap.len() < k {
                            heap.push(key);
                        } else if key < *heap.peek().expect("nonempty") {
                            heap.pop();
                            heap.push(key);
                        }
                    }
                }
                Node::Split {
                    axis,
                    value,
                    left,
                    right,
                } => {
                    let diff = x[axis] - value;
                    let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                    stack.push((far, bound.max(diff * diff)));
                    stack.push((near, bound));
                }
            }
        }
        let mut out: Vec<(OrdF64, usize)> = heap.into_vec();
        out.sort();
        Ok(out.into_iter().map(|(_, p)| p).collect())
    }

    /// Linear-scan reference for [`k_nearest`](Self::k_nearest).
    pub fn k_nearest_linear(&self, x: &[f64], k: usize) -> Result<Vec<usize>> {
        self.check_query(x)?;
        if k == 0 || k > self.samples.len() {
            return Err(Error::InvalidInput(format!("k = {k} out of range")));
        }
        let mut all: Vec<(OrdF64, usize)> = (0..self.samples.len())
            .map(|p| (OrdF64(squared_distance(x, self.point(p))), p))
            .collect();
        all.sort();
        Ok(all.into_iter().take(k).map(|(_, p)| p).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta >= 0.0) {
        return Err(Error::InvalidInput(format!("radius must be >= 0, got {delta}")));
    }
    Ok(())
}

pub fn to_set(mask: &[bool]) -> BTreeSet<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(a, _)| a).collect()
}

/// Per-sample action masks of one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EligibleMask {
    fingerprint: String,
    #[serde(with = "maybe_inf")]
    delta: f64,
    action_count: usize,
    horizons: Vec<usize>,
    #[serde(with = "bitstring")]
    bits: Vec<bool>,
    #[serde(skip)]
    offsets: Vec<usize>,
}

mod bitstring {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bits: &[bool], s: S) -> Result<S::Ok, S::Error> {
        let text: String = bits.iter().map(|&b| if b { '1' } else { '0' }).collect();
        s.serialize_str(&text)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let text = String::deserialize(d)?;
        text.chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(serde::de::Error::custom(format!("bad mask bit {other:?}"))),
            })
            .collect()
    }
}

impl EligibleMask {
    /// Build from explicit per-step masks. `delta` records the rule used
    /// (NaN for masks that do not come from a radius rule).
    pub fn from_rows(dataset: &Dataset, delta: f64, rows: Vec<Vec<Vec<bool>>>) -> Result<Self> {
        let a = dataset.action_count();
        if rows.len() != dataset.len() {
            return Err(Error::InvalidInput("mask rows do not match dataset".into()));
        }
        let mut bits = Vec::with_capacity(dataset.total_steps() * a);
        let mut horizons = Vec::with_capacity(rows.len());
        for (i, (t, r)) in dataset.trajectories().iter().zip(rows).enumerate() {
            if r.len() != t.horizon() {
                return Err(Error::InvalidInput(format!(
                    "mask rows of trajectory {i} do not match horizon"
                )));
            }
            horizons.push(r.len());
            for (h, m) in r.into_iter().enumerate() {
                if m.len() != a {
                    return Err(Error::InvalidInput(format!("mask ({i}, {h}) has wrong length")));
                }
                if !m.iter().any(|&b| b) {
                    return Err(Error::InvalidInput(format!("mask ({i}, {h}) allows no action")));
                }
                bits.extend(m);
            }
        }
        let mut mask = EligibleMask {
            fingerprint: dataset.fingerprint().to_string(),
            delta,
            action_count: a,
            horizons,
            bits,
            offsets: Vec::new(),
        };
        mask.index_offsets();
        Ok(mask)
    }

    /// All-true masks (no constraint).
    pub fn all_true(dataset: &Dataset) -> Self {
        let rows = dataset
            .trajectories()
            .iter()
            .map(|t| vec![vec![true; dataset.action_count()]; t.horizon()])
            .collect();
        Self::from_rows(dataset, f64::INFINITY, rows).expect("well formed")
    }

    fn index_offsets(&mut self) {
        let mut offsets = Vec::with_capacity(self.horizons.len());
        let mut acc = 0;
        for &h in &self.horizons {
            offsets.push(acc);
            acc += h;
        }
        self.offsets = offsets;
    }

    pub fn get(&self, traj: usize, step: usize) -> &[bool] {
        let row = self.offsets[traj] + step;
        &self.bits[row * self.action_count..(row + 1) * self.action_count]
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn rows(&self) -> impl Iterator<Item = ((usize, usize), &[bool])> + '_ {
        self.horizons
            .iter()
            .enumerate()
            .flat_map(move |(i, &h)| (0..h).map(move |s| ((i, s), self.get(i, s))))
    }

    /// Elementwise intersection with another mask over the same dataset.
    pub fn intersect(&self, other: &EligibleMask) -> Result<EligibleMask> {
        if self.fingerprint != other.fingerprint || self.bits.len() != other.bits.len() {
            return Err(Error::InvalidInput("masks belong to different datasets".into()));
        }
        let mut out = self.clone();
        out.bits.iter_mut().zip(&other.bits).for_each(|(a, b)| *a &= *b);
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    /// Load a sidecar, checking it belongs to `dataset` and `delta`.
    pub fn load_for(path: impl AsRef<Path>, dataset: &Dataset, delta: f64) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut mask: EligibleMask = serde_json::from_str(&text)?;
        mask.index_offsets();
        if mask.fingerprint != dataset.fingerprint()
            || !(mask.delta == delta || (mask.delta.is_nan() && delta.is_nan()))
        {
            return Err(Error::InvalidInput(format!(
                "mask sidecar {} is for another dataset or radius",
                path.display()
            )));
        }
        Ok(mask)
    }
}

/// Eligibility masks for every logged step of `dataset`.
pub fn precompute_masks(index: &NeighborIndex, dataset: &Dataset, delta: f64) -> Result<EligibleMask> {
    check_delta(delta)?;
    let rows: Vec<Vec<Vec<bool>>> = dataset
        .trajectories()
        .par_iter()
        .map(|t| {
            t.contexts
                .iter()
                .map(|x| index.eligible_mask(x, delta))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    EligibleMask::from_rows(dataset, delta, rows)
}

/// Radius-rule masks for arbitrary contexts, backed by an index.
pub struct EligibleOracle {
    pub index: Arc<NeighborIndex>,
    pub delta: f64,
}

impl MaskOracle for EligibleOracle {
    fn mask(&self, x: &[f64]) -> Vec<bool> {
        self.index
            .eligible_mask(x, self.delta)
            .unwrap_or_else(|_| vec![false; self.index.action_count()])
    }
}

/// Eligible-set coverage of the behavior support at one sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub n: usize,
    /// Covered share of supported `(context, action)` pairs.
    pub coverage: f64,
    pub supported_pairs: usize,
    pub covered_pairs: usize,
    /// Eligible pairs the behavior never takes.
    pub unsupported_eligible: usize,
}

/// Coverage of `supp(μ)` by the eligible sets of data of growing size, on a
/// single-step environment with finitely many contexts. Each `n` draws a
/// fresh dataset seeded with `derive(seed, n)`.
pub fn asymptotic_coverage_check(
    env: &Env,
    behavior: &BehaviorSpec,
    delta: f64,
    ns: &[usize],
    seed_value: u64,
) -> Result<Vec<CoverageRow>> {
    check_delta(delta)?;
    let contexts = match env.initial_contexts() {
        Some(c) if env.horizon() == 1 => c,
        _ => {
            return Err(Error::Unsupported(
                "coverage check needs a single-step environment with finitely many contexts".into(),
            ))
        }
    };
    let mu = EnvBehavior::new(Arc::new(env.clone()), behavior.clone())?;
    let support: Vec<Vec<bool>> = contexts
        .iter()
        .map(|x| mu.action_probs(x).map(|p| p.iter().map(|&q| q > 0.0).collect()))
        .collect::<Result<_>>()?;
    let supported_pairs = support.iter().flatten().filter(|&&b| b).count();
    ns.iter()
        .map(|&n| {
            let data = generate_logged_data(env, behavior, n, seed::derive(seed_value, n as u64))?;
            let index = NeighborIndex::build(&data)?;
            let (mut covered, mut unsupported) = (0, 0);
            for (x, supp) in contexts.iter().zip(&support) {
                for (eligible, &supported) in index.eligible_mask(x, delta)?.into_iter().zip(supp) {
                    match (eligible, supported) {
                        (true, true) => covered += 1,
                        (true, false) => unsupported += 1,
                        _ => {}
                    }
                }
            }
            Ok(CoverageRow {
                n,
                coverage: covered as f64 / supported_pairs as f64,
                supported_pairs,
                covered_pairs: covered,
                unsupported_eligible: unsupported,
            })
        })
        .collect()
}
