mod common;

use common::{small_stream, small_train_config, snapshot};
use krkc::baselines::Strategy;
use krkc::evaluation::{evaluate_task, EvalModel};
use krkc::models::{ModelPair};
use krkc::tensor::Tensor;
use krkc::trainer::{
    run_sequence, train_first_task, train_task, train_task_krkc, ModelRole, StepEvent, StepObserver, TrainConfig,
    TrainError,
};

#[test]
fn first_task_beats_untrained_model() {
    let stream = small_stream(1, 3);
    let cfg = small_train_config(10, 3);
    let untrained = ModelPair::new(&cfg.arch, 0).working;
    let before = evaluate_task(&EvalModel::Single(untrained), &stream[0]).unwrap();
    let state = train_first_task(&stream[0], &cfg).unwrap();
    let after = evaluate_task(&state.eval_model, &stream[0]).unwrap();
    assert!(after.map > before.map, "{} vs {}", after.map, before.map);
}

#[test]
fn first_task_copies_working_into_memory() {
    let stream = small_stream(1, 0);
    let state = train_first_task(&stream[0], &small_train_config(2, 0)).unwrap();
    assert!(state.pair.working.bit_equal(&state.pair.memory));
    let x = stream[0].query.to_tensor();
    assert_eq!(
        state.pair.working.forward(&x).unwrap().1.to_vec(),
        state.pair.memory.forward(&x).unwrap().1.to_vec()
    );
    assert!(!state.log.is_empty());
    for e in &state.log {
        assert_eq!(e.model, ModelRole::Working);
        assert!(e.loss_total.is_finite() && e.loss_ce.is_finite() && e.loss_trip.is_finite());
    }
    assert_eq!(state.memory.num_identities(), 4);
    assert_eq!(state.memory.len(), 8);
}

#[test]
fn step_log_length_is_epochs_times_batches() {
    let stream = small_stream(2, 1);
    let cfg = small_train_config(3, 1);
    let batches = krkc::trainer::batches_per_epoch(stream[0].train.len(), &cfg);
    let state = train_first_task(&stream[0], &cfg).unwrap();
    assert_eq!(state.steps.len(), 3 * batches);
    let state = train_task_krkc(&stream[1], state, &cfg, 2).unwrap();
    assert_eq!(state.steps.len(), 2 * 3 * batches);
    for s in state.steps.iter().filter(|s| s.task == 2) {
        let m = s.memory.expect("refreshing ran");
        for b in [s.working, m] {
            assert!((b.distill + b.ce + b.trip - b.total).abs() < 1e-9 * b.total.abs().max(1.0));
        }
    }
}

#[test]
fn later_task_requires_memory() {
    let stream = small_stream(2, 2);
    let cfg = small_train_config(1, 2);
    let mut state = train_first_task(&stream[0], &cfg).unwrap();
    state.memory = krkc::data::ExemplarMemory::new(2, 4);
    let err = train_task_krkc(&stream[1], state, &cfg, 2).unwrap_err();
    assert!(matches!(err, TrainError::EmptyMemory(2)));
    assert!(err.to_string().contains("train_first_task"));
}

#[test]
fn zero_refresh_rate_leaves_memory_untouched() {
    let stream = small_stream(2, 4);
    let cfg = TrainConfig {
        refresh_lr: 0.0,
        refresh_lr_last: 0.0,
        ..small_train_config(2, 4)
    };
    let state = train_first_task(&stream[0], &cfg).unwrap();
    struct Check {
        memory: Option<Vec<Vec<u64>>>,
    }
    impl StepObserver for Check {
        fn observe(&mut self, _e: &StepEvent<'_>, pair: &ModelPair) {
            let now = snapshot(&pair.memory);
            let first = self.memory.get_or_insert_with(|| now.clone());
            assert_eq!(*first, now);
        }
    }
    let mut check = Check { memory: None };
    train_task(&stream[1], state, &cfg, &Strategy::krh_krf(), 2, &mut check).unwrap();
    assert!(check.memory.is_some());
}

#[test]
fn frozen_teacher_equals_refreshing_at_zero_rate() {
    let stream = small_stream(3, 5);
    let cfg = TrainConfig {
        refresh_lr: 0.0,
        refresh_lr_last: 0.0,
        ..small_train_config(2, 5)
    };
    let frozen = run_sequence(&stream, None, &cfg, &Strategy::frozen_teacher(), None, &mut ()).unwrap();
    let zero = run_sequence(&stream, None, &cfg, &Strategy::krh_krf(), None, &mut ()).unwrap();
    assert_eq!(frozen.report, zero.report);
    assert_eq!(frozen.checkpoints, zero.checkpoints);
}

#[test]
fn refreshing_uses_post_update_working_predictions() {
    let stream = small_stream(2, 6);
    let cfg = small_train_config(1, 6);
    let state = train_first_task(&stream[0], &cfg).unwrap();
    #[derive(Default)]
    struct Order {
        events: Vec<&'static str>,
        inputs: Option<Tensor>,
        after_rehearsal: Option<Vec<Vec<u64>>>,
    }
    impl StepObserver for Order {
        fn observe(&mut self, e: &StepEvent<'_>, pair: &ModelPair) {
            match e {
                StepEvent::BeforeRehearsal { batch, .. } => {
                    self.events.push("before");
                    self.inputs = Some(batch.inputs.clone());
                }
                StepEvent::AfterRehearsal { .. } => {
                    self.events.push("rehearsal");
                    self.after_rehearsal = Some(snapshot(&pair.working));
                }
                StepEvent::AfterRefreshing { teacher_logits, .. } => {
                    self.events.push("refresh");
                    let fresh = pair.working.forward(self.inputs.as_ref().unwrap()).unwrap().1;
                    assert_eq!(fresh.to_vec(), teacher_logits.to_vec());
                    assert_eq!(self.after_rehearsal.as_ref().unwrap(), &snapshot(&pair.working));
                }
            }
        }
    }
    let mut order = Order::default();
    train_task(&stream[1], state, &cfg, &Strategy::krkc(), 2, &mut order).unwrap();
    assert!(!order.events.is_empty());
    for step in order.events.chunks(3) {
        assert_eq!(step, ["before", "rehearsal", "refresh"]);
    }
}

#[test]
fn two_task_run_has_triangular_matrices() {
    let stream = small_stream(2, 7);
    let out = run_sequence(&stream, None, &small_train_config(1, 7), &Strategy::krkc(), None, &mut ()).unwrap();
    for m in [&out.report.map, &out.report.rank1] {
        assert_eq!(m.rows.len(), 2);
        assert_eq!(m.rows[0].len(), 1);
        assert_eq!(m.rows[1].len(), 2);
        assert!(m.rows.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }
    assert_eq!(out.checkpoints.len(), 2);
}

#[test]
fn runs_are_deterministic() {
    let stream = small_stream(2, 8);
    let cfg = small_train_config(2, 8);
    let a = run_sequence(&stream, None, &cfg, &Strategy::krkc(), None, &mut ()).unwrap();
    let b = run_sequence(&stream, None, &cfg, &Strategy::krkc(), None, &mut ()).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.log, b.log);
    assert_eq!(a.checkpoints, b.checkpoints);
}

#[test]
fn evaluation_does_not_mutate_models() {
    let stream = small_stream(2, 9);
    let cfg = small_train_config(1, 9);
    let state = train_first_task(&stream[0], &cfg).unwrap();
    let state = train_task_krkc(&stream[1], state, &cfg, 2).unwrap();
    let before = state.pair.to_checkpoint();
    let fused = state.eval_model.clone();
    assert!(fused.is_fused());
    let r1 = evaluate_task(&fused, &stream[0]).unwrap();
    let r2 = evaluate_task(&fused, &stream[0]).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(before, state.pair.to_checkpoint());
}

#[test]
fn out_of_order_task_is_rejected() {
    let stream = small_stream(2, 10);
    let cfg = small_train_config(1, 10);
    let state = train_first_task(&stream[0], &cfg).unwrap();
    let err = train_task_krkc(&stream[0], state, &cfg, 2).unwrap_err();
    assert!(matches!(err, TrainError::OutOfOrder { task: 1, previous: 1 }));
}
