mod common;

use std::fs;

use poela_core::envs::{make_env, mc_value, oracle_context_value, EnvSpec};
use poela_core::harness::{
    delta_sweep, diagnose_masks, execute, prepare_data, reselect, run_experiment, verify_report, ExperimentConfig,
};
use poela_core::learners::{train_poela, LearnerKind, MaskRule, SelectionMode, TrainConfig};
use poela_core::neighborhood::precompute_masks;
use poela_core::policy::UniformPolicy;
use poela_core::{Architecture, Dataset, NeighborIndex, Policy, Trajectory};
use serde_json::Value;

fn small_config(seed: u64) -> ExperimentConfig {
    let mut c = common::tree_config(seed, 150, 40);
    c.grid.lambdas = vec![0.0, 1.0];
    c.grid.restarts = 1;
    c.selection.ess_threshold = 10.0;
    c.evaluation.mc_rollouts = Some(300);
    c
}

#[test]
fn verify_detects_tampering_and_missing_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    run_experiment(&small_config(7), dir).unwrap();
    let clean = verify_report(dir).unwrap();
    assert!(clean.passed(), "{clean:?}");

    let path = dir.join("report.json");
    let original = fs::read_to_string(&path).unwrap();
    let mut report: Value = serde_json::from_str(&original).unwrap();
    let v = report["learners"][1]["validation"]["value"].as_f64().unwrap();
    report["learners"][1]["validation"]["value"] = Value::from(v + 1e-3);
    fs::write(&path, serde_json::to_string_pretty(&report).unwrap()).unwrap();
    let tampered = verify_report(dir).unwrap();
    assert!(!tampered.passed());
    assert!(tampered.missing.is_empty());
    assert_eq!(tampered.discrepancies.len(), 1, "{:?}", tampered.discrepancies);
    assert_eq!(tampered.discrepancies[0].field, "learners[1].validation.value");

    fs::write(&path, original).unwrap();
    let victim = dir.join("runs/cell-002/ckpt-20.policy");
    fs::remove_file(&victim).unwrap();
    let broken = verify_report(dir).unwrap();
    assert!(!broken.passed());
    assert_eq!(broken.missing, vec![victim]);
}

#[test]
fn unreachable_ess_threshold_selects_nothing() {
    let mut c = small_config(3);
    c.selection.ess_threshold = 1e9;
    c.evaluation.mc_rollouts = None;
    let data = prepare_data(&c).unwrap();
    let r = execute(&c, &data, None).unwrap();
    for l in &r.learners {
        assert!(l.selected.is_none());
        assert_eq!(l.note.as_deref(), Some("no policy selected"));
        assert!(l.test.is_none() && l.mc.is_none());
    }
}

#[test]
fn selection_takes_the_best_passing_checkpoint() {
    let c = small_config(5);
    let data = prepare_data(&c).unwrap();
    let r = execute(&c, &data, None).unwrap();
    assert_eq!(r.data.train, data.train.fingerprint());
    assert_eq!(r.data.test, data.test.fingerprint());
    for l in &r.learners {
        let best = r
            .cells
            .iter()
            .filter(|cell| cell.config.learner.name() == l.learner)
            .flat_map(|cell| &cell.checkpoints)
            .filter_map(|m| m.validation.as_ref())
            .filter(|v| v.ess >= c.selection.ess_threshold)
            .map(|v| v.value)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(l.validation.as_ref().unwrap().value, best);
    }
    // Re-selecting from stored metrics gives the same answer.
    for (name, chosen) in reselect(&r, SelectionMode::BestCheckpoint, c.selection.ess_threshold) {
        let l = r.learner(&name).unwrap();
        let (cell, step, value, _) = chosen.unwrap();
        let s = l.selected.as_ref().unwrap();
        assert_eq!((cell.as_str(), step), (s.cell.as_str(), s.step));
        assert_eq!(value, l.validation.as_ref().unwrap().value);
    }
    // Final-checkpoint mode only ever picks the last step.
    for (_, chosen) in reselect(&r, SelectionMode::Final, 0.0) {
        assert_eq!(chosen.unwrap().1, c.grid.max_steps);
    }
}

#[test]
fn unbounded_radius_matches_the_unconstrained_learner() {
    let mut c = small_config(9);
    c.evaluation.mc_rollouts = None;
    c.grid.learners = vec![LearnerKind::PoCrm];
    let data = prepare_data(&c).unwrap();
    let crm = execute(&c, &data, None).unwrap();
    let rows = delta_sweep(&c, &[0.0, f64::INFINITY], &data).unwrap();
    let l = &crm.learners[0];
    let inf = &rows[1];
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs());
    assert!(close(
        inf.train.as_ref().unwrap().value,
        l.train.as_ref().unwrap().value
    ));
    assert!(close(inf.test.as_ref().unwrap().value, l.test.as_ref().unwrap().value));
    assert!(rows[0].train.as_ref().unwrap().ess >= inf.train.as_ref().unwrap().ess - 1e-9);
}

fn point(x: Vec<f64>, action: usize, prob: f64) -> Trajectory {
    Trajectory {
        contexts: vec![x],
        actions: vec![action],
        rewards: vec![0.0],
        behavior_probs: vec![prob],
        meta: None,
    }
}

#[test]
fn mask_comparison_edge_cases() {
    let data = common::random_dataset(1, 40, 1, 2, 3, false);
    let same = diagnose_masks(&data, 0.0, &UniformPolicy { actions: 3 }, 1.0).unwrap();
    assert_eq!(same.mean_jaccard, 1.0);
    assert!(same.rows.iter().all(|r| r.eligible == 1 && r.threshold == 1));

    let loose = diagnose_masks(&data, 0.0, &UniformPolicy { actions: 3 }, 0.3).unwrap();
    assert!(loose.rows.iter().all(|r| r.threshold == 3 && r.eligible == 1));
    assert_eq!(loose.eligible_more_conservative, data.len());
}

#[test]
fn masks_disagree_both_ways_on_clustered_data() {
    // A repeated context logged with a common and a rare action, and a
    // spread-out region where every action is common.
    let mut rng = poela_core::seed::rng(4);
    let mut trajectories = Vec::new();
    for i in 0..30 {
        trajectories.push(point(vec![0.0, 0.0], usize::from(i == 29), 0.5));
    }
    for i in 0..30 {
        use rand::Rng;
        let x = vec![5.0 + rng.random::<f64>(), 5.0 + rng.random::<f64>()];
        trajectories.push(point(x, i % 3, 1.0 / 3.0));
    }
    let data = Dataset::from_trajectories(trajectories, 3, "clusters").unwrap();
    let mu = poela_core::behavior::knn_behavior(&data, 15).unwrap();
    let cmp = diagnose_masks(&data, 0.0, &mu, 0.1).unwrap();
    assert!(cmp.eligible_more_conservative > 0, "{cmp:?}");
    assert!(cmp.threshold_more_conservative > 0, "{cmp:?}");
}

#[test]
fn monte_carlo_agrees_with_exact_values() {
    for spec in [
        EnvSpec::Example2 { horizon: 6, actions: 2 },
        EnvSpec::Example3 { horizon: 4, actions: 3 },
        EnvSpec::Bandit {
            means: vec![vec![0.1, 0.7], vec![0.5, 0.2]],
            context_probs: Some(vec![0.3, 0.7]),
        },
    ] {
        let env = make_env(&spec).unwrap();
        let policy = UniformPolicy {
            actions: env.action_count(),
        };
        let exact = oracle_context_value(&env, &policy).unwrap().value;
        let mc = mc_value(&env, &policy, 20_000, 2).unwrap();
        assert!(
            (mc.mean - exact).abs() < 4.0 * mc.std_error,
            "{spec:?}: {exact} vs {mc:?}"
        );
    }
    let tree = make_env(&EnvSpec::Example2 {
        horizon: 10,
        actions: 2,
    })
    .unwrap();
    let first = poela_core::envs::TabularPolicy::new(2, vec![1.0, 0.0]);
    let second = poela_core::envs::TabularPolicy::new(2, vec![0.0, 1.0]);
    assert!(oracle_context_value(&tree, &first).unwrap().value.abs() < 1e-12);
    assert!((oracle_context_value(&tree, &second).unwrap().value + 1.5).abs() < 1e-12);
}

#[test]
fn poela_checkpoints_stay_on_eligible_actions() {
    let data = common::random_dataset(8, 60, 3, 2, 4, true);
    let val = common::random_dataset(9, 30, 3, 2, 4, true);
    let config = TrainConfig {
        learner: LearnerKind::Poela { delta: 0.1 },
        architecture: Architecture::LinearSoftmax,
        lambda: 0.1,
        truncation: 1000.0,
        learning_rate: 0.5,
        max_steps: 30,
        checkpoint_every: 10,
        seed: 1,
    };
    let checkpoints = train_poela(&config, &data, &val).unwrap();
    assert_eq!(checkpoints.iter().map(|c| c.step).collect::<Vec<_>>(), vec![10, 20, 30]);
    let rule = MaskRule::for_learner(&config.learner, &data, None).unwrap();
    let index = NeighborIndex::build(&data).unwrap();
    let masks = precompute_masks(&index, &data, 0.1).unwrap();
    for c in &checkpoints {
        let deployed = rule.deploy(c.params.clone());
        for ((i, h), allowed) in masks.rows() {
            let p = deployed.action_probs(&data.get(i).contexts[h]).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, &ok) in allowed.iter().enumerate() {
                assert!(ok || p[a] == 0.0, "step {} sample ({i}, {h}) action {a}", c.step);
            }
        }
    }
}
