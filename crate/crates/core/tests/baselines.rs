mod common;

use common::{small_stream, small_train_config};
use krkc::baselines::{run_strategy, run_strategy_full, Strategy, StrategyError};
use krkc::data::{generate_stream, StreamConfig};
use krkc::evaluation::average_incremental_accuracy;
use krkc::experiment::median;
use krkc::trainer::{compute_references, train_first_task, train_task_krkc, ModelRole, TrainConfig, TrainError};

#[test]
fn invalid_flag_combination_is_an_error() {
    let stream = small_stream(2, 0);
    let mut s = Strategy::naive();
    s.consolidation = krkc::baselines::Consolidation::MscFsc;
    let err = run_strategy(&s, &stream, &small_train_config(1, 0), None).unwrap_err();
    assert!(matches!(err, TrainError::Strategy(StrategyError::ConsolidationWithoutTeacher(_))));
}

#[test]
fn joint_training_ignores_task_order() {
    let stream = small_stream(3, 1);
    let cfg = small_train_config(2, 1);
    let mut reversed = stream.clone();
    reversed.reverse();
    let a = run_strategy_full(&Strategy::joint(), &stream, None, &cfg, None).unwrap();
    let b = run_strategy_full(&Strategy::joint(), &reversed, None, &cfg, None).unwrap();
    assert_eq!(a.checkpoints, b.checkpoints);
    let last = |r: &krkc::evaluation::MetricsReport| {
        let mut v = r.rank1.rows.last().unwrap().clone();
        v.sort_by(f64::total_cmp);
        v
    };
    assert_eq!(last(&a.report), last(&b.report));
    assert_eq!(
        average_incremental_accuracy(&a.report.rank1).unwrap(),
        average_incremental_accuracy(&b.report.rank1).unwrap()
    );
}

#[test]
fn naive_keeps_no_exemplars_and_trains_only_the_working_model() {
    let stream = small_stream(2, 2);
    let out = run_strategy_full(&Strategy::naive(), &stream, None, &small_train_config(1, 2), None).unwrap();
    assert!(out.log.iter().all(|e| e.model == ModelRole::Working));
    assert_eq!(out.report.rank1.rows.len(), 2);
}

#[test]
fn references_cover_tasks_after_the_first() {
    let stream = small_stream(3, 3);
    let refs = compute_references(&stream, &small_train_config(1, 3)).unwrap();
    assert_eq!(refs.rank1.len(), 3);
    assert!(refs.rank1[0].is_none() && refs.map[0].is_none());
    assert!(refs.rank1[1..].iter().all(Option::is_some));
    let report = run_strategy(&Strategy::krkc(), &stream, &small_train_config(1, 3), Some(&refs)).unwrap();
    assert!(report.summary().unwrap().fwt.is_some());
}

#[test]
fn joint_is_an_upper_bound_on_the_default_stream() {
    let mut joint = Vec::new();
    let mut best_sequential = Vec::new();
    for seed in 0..5 {
        let stream = generate_stream(&StreamConfig {
            seed,
            ..StreamConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let s = |st: Strategy| {
            let r = run_strategy(&st, &stream, &cfg, None).unwrap();
            average_incremental_accuracy(&r.rank1).unwrap()
        };
        joint.push(s(Strategy::joint()));
        best_sequential.push(
            [Strategy::naive(), Strategy::frozen_teacher(), Strategy::krh_krf(), Strategy::krh_krf_msc(), Strategy::krkc()]
                .into_iter()
                .map(s)
                .collect::<Vec<_>>(),
        );
    }
    let joint = median(&joint).unwrap();
    for i in 0..5 {
        let m = median(&best_sequential.iter().map(|v| v[i]).collect::<Vec<_>>()).unwrap();
        assert!(joint >= m, "joint {joint} < sequential strategy #{i} {m}");
    }
}

#[test]
fn refreshing_lowers_memory_cross_entropy_on_new_task() {
    let mut drops = Vec::new();
    for seed in 0..5 {
        let stream = generate_stream(&StreamConfig {
            seed,
            n_tasks: 2,
            ..StreamConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let state = train_first_task(&stream[0], &cfg).unwrap();
        let state = train_task_krkc(&stream[1], state, &cfg, 4).unwrap();
        let ce: Vec<f64> = state
            .log
            .iter()
            .filter(|e| e.task == 2 && e.model == ModelRole::Memory)
            .map(|e| e.loss_ce)
            .collect();
        assert_eq!(ce.len(), cfg.epochs);
        drops.push(ce[0] - ce[ce.len() - 1]);
    }
    assert!(median(&drops).unwrap() > 0.0, "{drops:?}");
}
