use std::fs;

use softgem::harness::{
    self, build_tasks, parameter_digest, train_sequence, train_tasks, ExperimentConfig, Method,
    Phase, RunRecord,
};
use softgem::metrics::LCA_BETA;

fn config(method: &str, extra: &str, tasks: usize) -> ExperimentConfig {
    let json = format!(
        r#"{{
            "schema_version": 1,
            "method": "{method}",
            {extra}
            "stream": {{
                "total_tasks": {tasks},
                "cv_tasks": 0,
                "kind": "permuted",
                "base": {{"type": "synthetic", "classes": 4, "dim": 12,
                          "train_per_class": 30, "test_per_class": 10, "seed": 5}},
                "seed": 9
            }},
            "hidden_dims": [16],
            "mem_per_class": 5,
            "ref_batch_size": 32,
            "seeds": [1, 2]
        }}"#
    );
    let cfg = ExperimentConfig::from_json(&json).unwrap();
    cfg.validate().unwrap();
    cfg
}

fn digests(cfg: &ExperimentConfig, seed: u64) -> Vec<(usize, String, bool)> {
    let (tasks, classes) = build_tasks(cfg, Phase::Evaluation).unwrap();
    let mut out = Vec::new();
    train_tasks(cfg, seed, &tasks, classes, &mut |ev| {
        out.push((ev.task, parameter_digest(ev.parameters), ev.projected));
    })
    .unwrap();
    out
}

#[test]
fn vanilla_single_task_gives_one_by_one_matrix() {
    let rec = train_sequence(&config("VAN", "", 1), 1).unwrap();
    assert_eq!(rec.accuracy.tasks(), 1);
    assert!(rec.accuracy.get(1, 1).is_some());
    let m = rec.metrics().unwrap();
    assert!(m.forgetting.is_none() && m.backward_transfer.is_none());
    assert_eq!(rec.steps_per_task, vec![12]);
}

#[test]
fn soft_gem_first_task_matches_vanilla_bitwise() {
    let van = digests(&config("VAN", "", 3), 4);
    let soft = digests(&config("SOFTGEM", r#""epsilon": 0.4,"#, 3), 4);
    let first_van: Vec<_> = van.iter().filter(|d| d.0 == 1).collect();
    let first_soft: Vec<_> = soft.iter().filter(|d| d.0 == 1).collect();
    assert!(!first_van.is_empty());
    assert_eq!(first_van, first_soft);
    assert!(first_soft.iter().all(|d| !d.2));
}

#[test]
fn epsilon_zero_follows_agem_trajectory() {
    let agem = digests(&config("AGEM", "", 3), 2);
    let soft = digests(&config("SOFTGEM", r#""epsilon": 0.0,"#, 3), 2);
    assert_eq!(agem, soft);
}

#[test]
fn projection_counts_by_method() {
    for method in ["VAN", "ER"] {
        let rec = train_sequence(&config(method, "", 3), 1).unwrap();
        assert_eq!(rec.total_projections(), 0, "{method}");
    }
    for (method, extra) in [
        ("AGEM", ""),
        ("GEM", ""),
        ("AAGEM", ""),
        ("SOFTGEM", r#""epsilon": 0.5,"#),
    ] {
        let rec = train_sequence(&config(method, extra, 3), 1).unwrap();
        assert_eq!(rec.projections_per_task[0], 0, "{method}");
        assert!(rec.total_projections() > 0, "{method}");
    }
}

#[test]
fn accuracy_matrix_is_fully_populated() {
    let rec = train_sequence(&config("GEM", "", 3), 2).unwrap();
    for i in 1..=3 {
        for j in 1..=3 {
            let a = rec.accuracy.get(i, j).unwrap();
            assert!((0.0..=1.0).contains(&a));
        }
    }
    assert_eq!(rec.random_baseline.0.len(), 3);
    assert_eq!(rec.learning_curve.0.len(), LCA_BETA + 1);
}

#[test]
fn suite_writes_records_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfgs = [config("VAN", "", 2), config("AGEM", "", 2)];
    let summary = harness::run_suite(&cfgs, dir.path(), 1).unwrap();
    assert_eq!(summary.record_files.len(), 4);
    assert_eq!(summary.rows.len(), 2);
    let records = fs::read_dir(dir.path().join("records")).unwrap().count();
    assert_eq!(records, 4);
    let csv = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next().unwrap(),
        "method,seed,A_T,F_T,a_1,a_t,BWT,FWT,LCA_10"
    );
    for f in &summary.record_files {
        let rec = RunRecord::load(f).unwrap();
        assert_eq!(rec.lr, 0.1);
        assert_eq!(rec.batch_size, 10);
    }

    let again = tempfile::tempdir().unwrap();
    harness::run_suite(&cfgs, again.path(), 2).unwrap();
    for name in ["summary.csv", "summary.json", "metrics.csv"] {
        assert_eq!(
            fs::read(dir.path().join(name)).unwrap(),
            fs::read(again.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn colliding_labels_are_made_unique() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = config("VAN", "", 1);
    a.seeds = vec![1];
    let mut b = a.clone();
    b.lr = 0.05;
    let summary = harness::run_suite(&[a, b], dir.path(), 1).unwrap();
    assert_eq!(summary.rows.len(), 2);
    assert_ne!(summary.rows[0].label, summary.rows[1].label);
}

#[test]
fn config_rejects_unknown_keys_and_missing_epsilon() {
    let good = serde_json::to_value(config("VAN", "", 2)).unwrap();
    let mut unknown = good.clone();
    unknown["momentum"] = serde_json::json!(0.9);
    assert!(ExperimentConfig::from_json(&unknown.to_string()).is_err());

    let mut soft = good.clone();
    soft["method"] = serde_json::json!("SOFTGEM");
    let cfg = ExperimentConfig::from_json(&soft.to_string()).unwrap();
    assert!(cfg.validate().is_err());

    let mut stray = good;
    stray["epsilon"] = serde_json::json!(0.2);
    let cfg = ExperimentConfig::from_json(&stray.to_string()).unwrap();
    assert!(cfg.validate().is_err());

    let mut cfg = config("VAN", "", 2);
    cfg.schema_version = 2;
    assert!(cfg.validate().is_err());
}

#[test]
fn record_round_trips_through_json() {
    let rec = train_sequence(&config("ER", "", 2), 3).unwrap();
    let back: RunRecord = serde_json::from_str(&rec.to_json()).unwrap();
    assert_eq!(back, rec);
    assert_eq!(back.method, Method::ExperienceReplay);
}

#[test]
fn search_uses_cross_validation_tasks() {
    let mut cfg = config("SOFTGEM", r#""epsilon": 0.5,"#, 4);
    cfg.stream.cv_tasks = 2;
    cfg.seeds = vec![1];
    let (cv, _) = build_tasks(&cfg, Phase::CrossValidation).unwrap();
    let (eval, _) = build_tasks(&cfg, Phase::Evaluation).unwrap();
    assert_eq!((cv.len(), eval.len()), (2, 2));
    let out = harness::search_epsilon(&cfg, 3, 1, 1).unwrap();
    assert!(out.repeats <= 2);
    assert!((0.0..=1.0).contains(&out.best_epsilon));
    assert_eq!(harness::history_repeats(&out.history), out.repeats);
}
