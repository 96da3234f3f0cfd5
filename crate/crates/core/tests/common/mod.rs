#![allow(dead_code)]

use std::path::Path;

use poela_core::envs::{BehaviorSpec, EnvSpec};
use poela_core::harness::{DataSource, EvaluationConfig, ExperimentConfig, GridSpec, SelectionConfig};
use poela_core::learners::{LearnerKind, SelectionMode, DEFAULT_LAMBDAS};
use poela_core::neighborhood::EligibleMask;
use poela_core::policy::Architecture;
use poela_core::{seed, Dataset, Trajectory};
use rand::Rng;

/// Random logged data: contexts in `[0, 1]^dim` (snapped to a coarse grid
/// when `snap` so exact repeats occur), random per-step behavior
/// distributions, rewards in `[-1, 1]`, horizons in `1..=max_horizon`.
pub fn random_dataset(
    seed_value: u64,
    n: usize,
    max_horizon: usize,
    dim: usize,
    actions: usize,
    snap: bool,
) -> Dataset {
    let mut rng = seed::rng(seed_value);
    let trajectories = (0..n)
        .map(|_| {
            let h = rng.random_range(1..=max_horizon);
            let mut t = Trajectory {
                contexts: Vec::with_capacity(h),
                actions: Vec::with_capacity(h),
                rewards: Vec::with_capacity(h),
                behavior_probs: Vec::with_capacity(h),
                meta: None,
            };
            for _ in 0..h {
                let x: Vec<f64> = (0..dim)
                    .map(|_| {
                        let v: f64 = rng.random();
                        if snap {
                            (v * 4.0).round() / 4.0
                        } else {
                            v
                        }
                    })
                    .collect();
                let raw: Vec<f64> = (0..actions).map(|_| rng.random_range(0.1..1.0)).collect();
                let total: f64 = raw.iter().sum();
                let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut a = actions - 1;
                for (k, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        a = k;
                        break;
                    }
                }
                t.contexts.push(x);
                t.actions.push(a);
                t.rewards.push(rng.random_range(-1.0..1.0));
                t.behavior_probs.push(probs[a]);
            }
            t
        })
        .collect();
    Dataset::from_trajectories(trajectories, actions, "random test data").unwrap()
}

/// Random masks that always allow the logged action.
pub fn random_masks(dataset: &Dataset, seed_value: u64, keep: f64) -> EligibleMask {
    let mut rng = seed::rng(seed_value);
    let a = dataset.action_count();
    let rows = dataset
        .trajectories()
        .iter()
        .map(|t| {
            t.actions
                .iter()
                .map(|&logged| {
                    let mut m: Vec<bool> = (0..a).map(|_| rng.random_bool(keep)).collect();
                    m[logged] = true;
                    m
                })
                .collect()
        })
        .collect();
    EligibleMask::from_rows(dataset, f64::NAN, rows).unwrap()
}

/// The two-action, ten-step tree task with uniform logging, POELA at zero
/// radius against PO-CRM over the default lambda grid.
pub fn tree_config(master_seed: u64, n: usize, max_steps: usize) -> ExperimentConfig {
    ExperimentConfig {
        name: format!("tree-{master_seed}"),
        seed: master_seed,
        output_dir: None,
        data: DataSource::Env {
            env: EnvSpec::Example2 {
                horizon: 10,
                actions: 2,
            },
            behavior: BehaviorSpec::Uniform,
            n_train: n,
            n_val: n,
            n_test: n,
        },
        behavior: poela_core::behavior::BehaviorSource::Logged,
        estimated_propensities: false,
        grid: GridSpec {
            learners: vec![LearnerKind::Poela { delta: 0.0 }, LearnerKind::PoCrm],
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            truncation: 1000.0,
            learning_rates: vec![0.5],
            max_steps,
            checkpoint_every: 10,
            architecture: Architecture::LinearSoftmax,
            restarts: 5,
        },
        selection: SelectionConfig {
            mode: SelectionMode::BestCheckpoint,
            ess_threshold: 200.0,
        },
        evaluation: EvaluationConfig {
            mc_rollouts: Some(2000),
            bootstrap: None,
            low_reward_threshold: 0.0,
        },
    }
}

pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}
