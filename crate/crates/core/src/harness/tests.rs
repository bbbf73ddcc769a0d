use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::transformer::{Mark, TokenSequence, Transformer};

fn task(kind: TaskKind, num_classes: usize) -> SyntheticTask {
    SyntheticTask { kind, num_classes, train_size: 300, dev_size: 60, ..SyntheticTask::default() }
}

fn all_tasks() -> Vec<SyntheticTask> {
    vec![
        task(TaskKind::MajorityClass, 3),
        SyntheticTask { vocab_size: 12, min_len: 3, max_len: 8, ..task(TaskKind::PatternContainment, 2) },
        task(TaskKind::PairEntailment, 3),
        SyntheticTask { vocab_size: 21, max_len: 6, max_hypothesis: 3, ..task(TaskKind::PairEntailment, 3) },
    ]
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    for (i, t) in all_tasks().into_iter().enumerate() {
        let a = dir.path().join(format!("a{i}.jsonl"));
        let b = dir.path().join(format!("b{i}.jsonl"));
        write_jsonl(&a, &t.generate().unwrap().train).unwrap();
        write_jsonl(&b, &t.generate().unwrap().train).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let other = SyntheticTask { seed: 1, ..t };
        assert_ne!(other.generate().unwrap().train, read_jsonl(&a).unwrap());
    }
}

#[test]
fn stored_labels_are_recomputable() {
    let dir = tempfile::tempdir().unwrap();
    for t in all_tasks() {
        let data = t.generate().unwrap();
        let path = dir.path().join("dev.jsonl");
        write_jsonl(&path, &data.dev).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back, data.dev);
        for e in back.iter().chain(&data.train) {
            assert_eq!(t.label_of(&e.seq), e.label, "{:?}", t.kind);
            assert!(e.seq.len() <= t.max_seq_len());
        }
    }
}

#[test]
fn majority_class_is_balanced_at_default_sizes() {
    let t = SyntheticTask { kind: TaskKind::MajorityClass, vocab_size: 20, num_classes: 4, ..SyntheticTask::default() };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    write_jsonl(&path, &t.generate().unwrap().train).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut counts = [0usize; 4];
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        counts[v["label"].as_u64().unwrap() as usize] += 1;
    }
    let n: usize = counts.iter().sum();
    assert_eq!(n, t.train_size);
    for c in counts {
        let share = c as f64 / n as f64;
        assert!((share - 0.25).abs() <= 0.05 * 0.25, "{counts:?}");
    }
}

#[test]
fn pair_sequences_have_two_segments() {
    let t = task(TaskKind::PairEntailment, 3);
    let data = t.generate().unwrap();
    let mut seen = [0usize; 3];
    for e in &data.train {
        let s = &e.seq;
        assert_eq!(s.marks[0], Mark::Cls);
        let seps: Vec<usize> = s.sep_positions().collect();
        assert_eq!(seps.len(), 2);
        assert_eq!(*seps.last().unwrap(), s.len() - 1);
        assert!(s.segment_ids[..=seps[0]].iter().all(|&g| g == 0));
        assert!(s.segment_ids[seps[0] + 1..].iter().all(|&g| g == 1));
        seen[e.label] += 1;
    }
    assert!(seen.iter().all(|&c| c == 100), "{seen:?}");
}

#[test]
fn entailment_labels() {
    let t = task(TaskKind::PairEntailment, 3);
    assert_eq!(t.label_of(&TokenSequence::pair(&[3, 5], &[3])), 0);
    assert_eq!(t.label_of(&TokenSequence::pair(&[3, 5], &[4])), 2);
    assert_eq!(t.label_of(&TokenSequence::pair(&[3, 6], &[5])), 2);
    assert_eq!(t.label_of(&TokenSequence::pair(&[3, 5], &[7])), 1);
    assert_eq!(t.label_of(&TokenSequence::pair(&[3, 5], &[7, 4])), 2);
    let m = task(TaskKind::MajorityClass, 2);
    assert_eq!(m.label_of(&TokenSequence::single(&[3, 4, 6])), 1);
    let p = task(TaskKind::PatternContainment, 2);
    assert_eq!(p.label_of(&TokenSequence::single(&[5, 3, 4])), 1);
    assert_eq!(p.label_of(&TokenSequence::single(&[4, 3, 5])), 0);
}

#[test]
fn invalid_tasks_are_rejected() {
    let bad = [
        SyntheticTask { min_len: 6, max_len: 5, ..SyntheticTask::default() },
        SyntheticTask { vocab_size: 14, ..SyntheticTask::default() },
        SyntheticTask { vocab_size: 9, ..SyntheticTask::default() },
        SyntheticTask { num_classes: 2, ..SyntheticTask::default() },
        SyntheticTask { min_len: 1, ..task(TaskKind::PatternContainment, 2) },
        task(TaskKind::MajorityClass, 1),
    ];
    for t in bad {
        assert!(t.generate().is_err(), "{t:?}");
    }
}

#[test]
fn run_config_defaults_and_json() {
    let c = RunConfig::default();
    c.validate().unwrap();
    assert_eq!((c.teacher.num_layers, c.teacher.hidden_dim, c.teacher.num_heads), (8, 64, 4));
    assert_eq!((c.student.num_layers, c.student.hidden_dim, c.student.num_heads), (4, 32, 2));
    let text = serde_json::to_string(&c).unwrap();
    assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
    let partial: RunConfig = serde_json::from_str(r#"{"sweep":{"repetitions":5}}"#).unwrap();
    assert_eq!(partial.sweep.repetitions, 5);
    assert_eq!(partial.teacher, c.teacher);
}

#[test]
fn reseeding_is_deterministic() {
    let mut a = RunConfig::default();
    let mut b = RunConfig::default();
    a.reseed(11);
    b.reseed(11);
    assert_eq!(a, b);
    b.reseed(12);
    assert_ne!(a, b);
    let seeds = [a.task.seed, a.teacher_schedule.seed, a.student_seed, a.hsk.seed, a.prediction.seed, a.sweep.seed, a.teacher_seed()];
    let mut unique = seeds.to_vec();
    unique.sort_unstable();
    unique.dedup();
    assert_eq!(unique.len(), seeds.len());
}

fn random_rows(rng: &mut ChaCha8Rng) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for target in [None, Some(0), Some(1)] {
        for config_index in 0..rng.random_range(1..4) {
            for repetition in 0..3 {
                let failed = rng.random_bool(0.1);
                rows.push(SweepRow {
                    kind: if target.is_some() { RowKind::Compressed } else { RowKind::FullTensor },
                    target,
                    config_index,
                    n_depth: 1,
                    n_length: 1,
                    width_fraction: 1.0,
                    a_hsk: 1.0,
                    normalized_a_hsk: 0.1,
                    repetition,
                    seed: repetition as u64,
                    dev_accuracy: (!failed).then(|| rng.random_range(0.0..1.0)),
                    error: failed.then(|| "boom".to_string()),
                });
            }
        }
    }
    rows
}

#[test]
fn aggregates_match_recomputation_from_rows() {
    let plan = SweepPlan { targets: vec![SweepTarget { amount: 1.0, tolerance_pct: 10 }, SweepTarget { amount: 3.0, tolerance_pct: 5 }], ..SweepPlan::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let rows = random_rows(&mut rng);
        let (means, aggs) = aggregate(&plan, &rows);
        for a in &aggs {
            let group: Vec<&ConfigMean> = means.iter().filter(|m| m.kind == a.kind && m.target == a.target).collect();
            let config_means: Vec<f64> = group
                .iter()
                .map(|m| {
                    let accs: Vec<f64> = rows
                        .iter()
                        .filter(|r| r.kind == m.kind && r.target == m.target && r.config_index == m.config_index)
                        .filter_map(|r| r.dev_accuracy)
                        .collect();
                    accs.iter().sum::<f64>() / accs.len() as f64
                })
                .collect();
            let avg = config_means.iter().sum::<f64>() / config_means.len() as f64;
            let best = config_means.iter().copied().fold(0.0, f64::max);
            let var = config_means.iter().map(|m| (m - avg).powi(2)).sum::<f64>() / config_means.len() as f64;
            assert!((a.avg - avg).abs() < 1e-12);
            assert_eq!(a.best, best);
            assert!((a.std - var.sqrt()).abs() < 1e-12);
            let failed = rows.iter().filter(|r| r.kind == a.kind && r.target == a.target && r.error.is_some()).count();
            assert_eq!(a.failed_runs, failed);
            assert_eq!(a.amount, a.target.map(|t| plan.targets[t].amount));
        }
    }
}

fn tiny_run() -> RunConfig {
    let t = SyntheticTask { train_size: 48, dev_size: 12, ..SyntheticTask::default() };
    let mut run = RunConfig {
        teacher: model_config(2, 8, 2, &t),
        student: model_config(1, 4, 1, &t),
        task: t,
        ..RunConfig::default()
    };
    run.compression.l_top = 2;
    run.hsk.num_epochs = 1;
    run.prediction.num_epochs = 1;
    run.sweep = SweepPlan {
        targets: vec![SweepTarget { amount: 1.0, tolerance_pct: 10 }],
        configs_per_target: 1,
        repetitions: 1,
        ..SweepPlan::default()
    };
    run
}

#[test]
fn one_config_one_repetition_gives_one_row_plus_baselines() {
    let run = tiny_run();
    let data = run.task.generate().unwrap();
    let teacher = Transformer::new(run.teacher.clone(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let table = run_sweep(&run, &teacher, &data, dir.path()).unwrap();
    let kinds: Vec<RowKind> = table.rows.iter().map(|r| r.kind).collect();
    assert_eq!(kinds, vec![RowKind::PredictionOnly, RowKind::FullTensor, RowKind::Compressed]);
    assert!(table.rows.iter().all(|r| r.error.is_none() && r.dev_accuracy.is_some()));
    assert_eq!(table.rows[1].normalized_a_hsk, 1.0);
    assert_eq!(table.aggregates.len(), 3);

    let mut offline = run.clone();
    offline.sweep.mode = Mode::Offline;
    let other = run_sweep(&offline, &teacher, &data, dir.path()).unwrap();
    assert_eq!(other.rows, table.rows);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);

    table.save(dir.path()).unwrap();
    let runs = std::fs::read_to_string(dir.path().join("sweep_runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 4);
    let summary = std::fs::read_to_string(dir.path().join("sweep_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
}

#[test]
fn failed_runs_are_recorded_and_the_sweep_continues() {
    let mut run = tiny_run();
    run.sweep.targets.push(SweepTarget { amount: 1000.0, tolerance_pct: 5 });
    run.sweep.workers = 2;
    run.prediction.max_seq_len = 3;
    let data = run.task.generate().unwrap();
    let teacher = Transformer::new(run.teacher.clone(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let table = run_sweep(&run, &teacher, &data, dir.path()).unwrap();
    assert_eq!(table.rows.len(), 4);
    assert!(table.rows.iter().all(|r| r.error.is_some()));
    assert_eq!(table.rows[3].target, Some(1));
    assert!(table.aggregates.iter().all(|a| a.configs == 0 && a.avg.is_nan()));
}

#[test]
fn worker_count_does_not_change_results() {
    let mut run = tiny_run();
    run.sweep.repetitions = 2;
    let data = run.task.generate().unwrap();
    let teacher = Transformer::new(run.teacher.clone(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let one = run_sweep(&run, &teacher, &data, dir.path()).unwrap();
    run.sweep.workers = 3;
    let three = run_sweep(&run, &teacher, &data, dir.path()).unwrap();
    assert_eq!(one.rows, three.rows);
}
