//! The training loop: task-1 bootstrap, per-batch rehearsal then refreshing,
//! end-of-task consolidation and memory update, and the learning-rate
//! schedule.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{Strategy, StrategyError};
use crate::data::{derive_seed, select_exemplars, Batch, BatchSource, DataError, ExemplarMemory, PkSampler, SampleSet, TaskDataset};
use crate::evaluation::{evaluate_task, EvalError, EvalModel, MetricsReport};
use crate::losses::{self, CompositeInputs, LossBreakdown, LossError};
use crate::models::{Architecture, Model, ModelError, ModelPair};
use crate::tensor::{Adam, AdamConfig, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error("exemplar memory is empty; run train_first_task before task {0}")]
    EmptyMemory(usize),
    #[error("task {task} arrived after task {previous}; tasks must be trained in order")]
    OutOfOrder { task: usize, previous: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("stream is empty")]
    EmptyStream,
    #[error("non-finite {model} loss at task {task}, epoch {epoch}")]
    NonFiniteLoss { model: &'static str, task: usize, epoch: usize },
}

pub type Result<T> = std::result::Result<T, TrainError>;

// Tags mixed into the run seed so each consumer of randomness has its own
// stream.
const TAG_INIT: u64 = 1;
const TAG_HEAD: u64 = 2;
const TAG_SAMPLING: u64 = 3;
const TAG_EXEMPLARS: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Epochs per task.
    pub epochs: usize,
    /// Working-model learning rate.
    pub rehearsal_lr: f64,
    /// Memory-model learning rate for tasks after the first.
    pub refresh_lr: f64,
    /// Memory-model learning rate on the final task of a finite stream.
    pub refresh_lr_last: f64,
    pub decay_factor: f64,
    pub temperature: f64,
    pub margin: f64,
    pub p: usize,
    pub k: usize,
    pub exemplar_per_id: usize,
    pub exemplar_max_ids: usize,
    /// Treat every task after the first as a middle task (no last-task rate).
    pub open_ended: bool,
    /// Distill only over classes that existed before the current task.
    pub distill_old_classes_only: bool,
    pub seed: u64,
    pub arch: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            rehearsal_lr: 3.5e-3,
            refresh_lr: 3.5e-4,
            refresh_lr_last: 3.5e-5,
            decay_factor: 0.1,
            temperature: 2.0,
            margin: 0.3,
            p: 8,
            k: 4,
            exemplar_per_id: 2,
            exemplar_max_ids: 16,
            open_ended: false,
            distill_old_classes_only: false,
            seed: 0,
            arch: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.rehearsal_lr > 0.0 && self.rehearsal_lr.is_finite()) {
            return bad(format!("rehearsal_lr must be positive, got {}", self.rehearsal_lr));
        }
        for (name, v) in [("refresh_lr", self.refresh_lr), ("refresh_lr_last", self.refresh_lr_last)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad(format!("margin must be non-negative, got {}", self.margin));
        }
        if self.p < 2 || self.k < 2 {
            return bad(format!("batch-hard mining needs P >= 2 and K >= 2, got P={} K={}", self.p, self.k));
        }
        if self.exemplar_per_id == 0 || self.exemplar_max_ids == 0 {
            return bad("exemplar_per_id and exemplar_max_ids must be positive".into());
        }
        Ok(())
    }
}

/// Scheduled `(rehearsal, refreshing)` learning rates for 1-based `task` and
/// `epoch`.
///
/// Task 1 only trains the working model and decays after epoch
/// `ceil(2E/3)`; later tasks decay both rates after epoch `ceil(E/2)`.
pub fn lr_for(task: usize, n_tasks: usize, epoch: usize, config: &TrainConfig) -> (f64, f64) {
    let e = config.epochs;
    if task <= 1 {
        let decay_after = (2 * e).div_ceil(3);
        let f = if epoch > decay_after { config.decay_factor } else { 1.0 };
        return (config.rehearsal_lr * f, 0.0);
    }
    let last = task == n_tasks && !config.open_ended;
    let eta = if last { config.refresh_lr_last } else { config.refresh_lr };
    let f = if epoch > e.div_ceil(2) { config.decay_factor } else { 1.0 };
    (config.rehearsal_lr * f, eta * f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Working,
    Memory,
}

/// Epoch-mean losses of one model, one line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub task: usize,
    pub epoch: usize,
    pub model: ModelRole,
    /// Anti-forgetting term for the working model, calibration term for the
    /// memory model.
    pub loss_anti_or_cali: f64,
    pub loss_ce: f64,
    pub loss_trip: f64,
    pub loss_total: f64,
    pub lr: f64,
}

/// Losses of a single batch for both models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub task: usize,
    pub epoch: usize,
    pub working: LossBreakdown,
    pub memory: Option<LossBreakdown>,
}

/// Points in a training step at which a [`StepObserver`] is called.
#[derive(Debug)]
pub enum StepEvent<'a> {
    BeforeRehearsal {
        task: usize,
        batch: &'a Batch,
        exemplars: Option<&'a Batch>,
    },
    AfterRehearsal {
        task: usize,
        loss: &'a LossBreakdown,
    },
    /// `teacher_logits` are the working-model logits the refreshing loss was
    /// computed against.
    AfterRefreshing {
        task: usize,
        teacher_logits: &'a Tensor,
        loss: &'a LossBreakdown,
    },
}

/// Hook into the training loop, used for instrumentation and tests.
pub trait StepObserver {
    fn observe(&mut self, _event: &StepEvent<'_>, _pair: &ModelPair) {}
}

impl StepObserver for () {}

/// Everything carried from one task to the next.
#[derive(Debug, Clone)]
pub struct RunState {
    pub pair: ModelPair,
    pub memory: ExemplarMemory,
    pub log: Vec<EpochLog>,
    pub steps: Vec<StepRecord>,
    /// Global identity id to classifier column.
    pub label_map: BTreeMap<usize, usize>,
    /// Model(s) to embed test data with after the latest task.
    pub eval_model: EvalModel,
    pub elapsed: Duration,
}

impl RunState {
    fn new(config: &TrainConfig) -> Self {
        let pair = ModelPair::new(&config.arch, derive_seed(config.seed, &[TAG_INIT]));
        let eval_model = EvalModel::Single(pair.working.clone());
        Self {
            pair,
            memory: ExemplarMemory::new(config.exemplar_per_id, config.exemplar_max_ids),
            log: Vec::new(),
            steps: Vec::new(),
            label_map: BTreeMap::new(),
            eval_model,
            elapsed: Duration::ZERO,
        }
    }

    fn register_classes(&mut self, dataset: &TaskDataset, seed: u64) -> Result<()> {
        let ids = dataset.train_identities();
        self.pair.expand_classifier(dataset.task, ids.len(), derive_seed(seed, &[TAG_HEAD, dataset.task as u64]))?;
        let start = self.pair.num_classes() - ids.len();
        for (i, id) in ids.into_iter().enumerate() {
            self.label_map.insert(id, start + i);
        }
        Ok(())
    }

    fn classes(&self, identities: &[usize]) -> Vec<usize> {
        identities.iter().map(|id| self.label_map[id]).collect()
    }
}

/// Number of PK batches that make up one epoch over `n` training samples.
pub fn batches_per_epoch(n: usize, config: &TrainConfig) -> usize {
    (n / (config.p * config.k)).max(1)
}

fn sampling_rng(config: &TrainConfig, task: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TAG_SAMPLING, task as u64]))
}

#[derive(Default)]
struct EpochMeans {
    sum: LossBreakdown,
    n: usize,
}

impl EpochMeans {
    fn add(&mut self, b: &LossBreakdown) {
        self.sum.distill += b.distill;
        self.sum.ce += b.ce;
        self.sum.trip += b.trip;
        self.sum.total += b.total;
        self.n += 1;
    }

    fn entry(&self, task: usize, epoch: usize, model: ModelRole, lr: f64) -> Option<EpochLog> {
        if self.n == 0 {
            return None;
        }
        let n = self.n as f64;
        Some(EpochLog {
            task,
            epoch,
            model,
            loss_anti_or_cali: self.sum.distill / n,
            loss_ce: self.sum.ce / n,
            loss_trip: self.sum.trip / n,
            loss_total: self.sum.total / n,
            lr,
        })
    }
}

fn check_finite(b: &LossBreakdown, model: &'static str, task: usize, epoch: usize) -> Result<()> {
    if [b.distill, b.ce, b.trip, b.total].iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TrainError::NonFiniteLoss { model, task, epoch })
    }
}

/// CE + triplet training of a single model on one labelled set, following
/// the working-model schedule `schedule` = `(task, n_tasks)`. Shared by the
/// bootstrap task, joint training and the single-task reference runs.
#[allow(clippy::too_many_arguments)]
fn train_plain(
    model: &Model,
    train: &SampleSet,
    classes: &BTreeMap<usize, usize>,
    task: usize,
    schedule: (usize, usize),
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    log: &mut Vec<EpochLog>,
    steps: &mut Vec<StepRecord>,
) -> Result<()> {
    let sampler = PkSampler::new(train, BatchSource::NewTask);
    let mut adam = Adam::new(model.parameters(), AdamConfig::default());
    let batches = batches_per_epoch(train.len(), config);
    for epoch in 1..=config.epochs {
        let (lr, _) = lr_for(schedule.0, schedule.1, epoch, config);
        let mut means = EpochMeans::default();
        for _ in 0..batches {
            let batch = sampler.sample(config.p, config.k, rng)?;
            let labels: Vec<usize> = batch.identities.iter().map(|id| classes[id]).collect();
            let (emb, logits) = model.forward(&batch.inputs)?;
            let loss = losses::composite_loss(&CompositeInputs {
                student_logits: &logits,
                teacher_logits: None,
                student_new_embeddings: &emb,
                student_exemplar_embeddings: None,
                new_classes: &labels,
                new_identities: &batch.identities,
                exemplar_identities: &[],
                temperature: config.temperature,
                margin: config.margin,
                distill_columns: None,
            })?;
            check_finite(&loss.breakdown, "working", task, epoch)?;
            loss.total.backward()?;
            adam.step(lr)?;
            means.add(&loss.breakdown);
            steps.push(StepRecord {
                task,
                epoch,
                working: loss.breakdown,
                memory: None,
            });
        }
        log.extend(means.entry(task, epoch, ModelRole::Working, lr));
    }
    Ok(())
}

/// Trains the working model on task 1 with cross-entropy and triplet loss,
/// copies it into the memory model and stores task-1 exemplars.
pub fn train_first_task(dataset: &TaskDataset, config: &TrainConfig) -> Result<RunState> {
    config.validate()?;
    let started = Instant::now();
    let mut state = RunState::new(config);
    state.register_classes(dataset, config.seed)?;
    state.pair.task = dataset.task;
    let mut rng = sampling_rng(config, dataset.task);
    train_plain(
        &state.pair.working,
        &dataset.train,
        &state.label_map,
        dataset.task,
        (1, 1),
        config,
        &mut rng,
        &mut state.log,
        &mut state.steps,
    )?;
    state.pair.sync_memory();
    state.eval_model = EvalModel::Single(state.pair.working.clone());
    update_exemplars(&mut state, dataset, config)?;
    state.elapsed += started.elapsed();
    Ok(state)
}

fn update_exemplars(state: &mut RunState, dataset: &TaskDataset, config: &TrainConfig) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TAG_EXEMPLARS, dataset.task as u64]));
    let additions = select_exemplars(
        &state.pair.working,
        dataset,
        config.exemplar_per_id,
        config.exemplar_max_ids,
        &mut rng,
    )?;
    state.memory.add(additions);
    Ok(())
}

/// One task of the full method: rehearsal and refreshing per batch, then
/// model-space consolidation, fused evaluation and a memory update.
pub fn train_task_krkc(
    dataset: &TaskDataset,
    state: RunState,
    config: &TrainConfig,
    n_tasks: usize,
) -> Result<RunState> {
    train_task(dataset, state, config, &Strategy::krkc(), n_tasks, &mut ())
}

/// One task `t >= 2` under `strategy`.
///
/// Per batch: sample new data and (if enabled) an exemplar batch, step the
/// working model on the rehearsal objective, then recompute both forward
/// passes and step the memory model on the refreshing objective. The same
/// exemplar batch serves both steps.
pub fn train_task(
    dataset: &TaskDataset,
    mut state: RunState,
    config: &TrainConfig,
    strategy: &Strategy,
    n_tasks: usize,
    observer: &mut dyn StepObserver,
) -> Result<RunState> {
    config.validate()?;
    strategy.validate()?;
    let task = dataset.task;
    if task <= state.pair.task {
        return Err(TrainError::OutOfOrder {
            task,
            previous: state.pair.task,
        });
    }
    if strategy.use_exemplars && state.memory.is_empty() {
        return Err(TrainError::EmptyMemory(task));
    }
    let started = Instant::now();
    let old_classes = state.pair.num_classes();
    state.register_classes(dataset, config.seed)?;
    state.pair.task = task;

    let exemplar_set = state.memory.to_sample_set(dataset.train.dim);
    let new_sampler = PkSampler::new(&dataset.train, BatchSource::NewTask);
    let exemplar_sampler = PkSampler::new(&exemplar_set, BatchSource::Exemplar);
    let exemplar_p = config.p.min(exemplar_sampler.num_identities());
    let mut rng = sampling_rng(config, task);
    let mut working_opt = Adam::new(state.pair.working.parameters(), AdamConfig::default());
    let mut memory_opt = Adam::new(state.pair.memory.parameters(), AdamConfig::default());
    let distill_columns = config.distill_old_classes_only.then_some(old_classes);
    let batches = batches_per_epoch(dataset.train.len(), config);

    for epoch in 1..=config.epochs {
        let (gamma, eta) = lr_for(task, n_tasks, epoch, config);
        let mut working_means = EpochMeans::default();
        let mut memory_means = EpochMeans::default();
        for _ in 0..batches {
            let batch = new_sampler.sample(config.p, config.k, &mut rng)?;
            let exemplars = if strategy.use_exemplars {
                Some(exemplar_sampler.sample(exemplar_p, config.k, &mut rng)?)
            } else {
                None
            };
            let labels = state.classes(&batch.identities);
            let exemplar_ids: &[usize] = exemplars.as_ref().map_or(&[], |b| &b.identities);
            observer.observe(
                &StepEvent::BeforeRehearsal {
                    task,
                    batch: &batch,
                    exemplars: exemplars.as_ref(),
                },
                &state.pair,
            );

            // Rehearsal: update the working model against the memory model.
            let (w_emb, w_logits) = state.pair.working.forward(&batch.inputs)?;
            let w_ex_emb = match &exemplars {
                Some(b) => Some(state.pair.working.embed(&b.inputs)?),
                None => None,
            };
            let teacher = if strategy.use_distillation {
                Some(state.pair.memory.forward(&batch.inputs)?.1.stop_gradient())
            } else {
                None
            };
            let w_loss = losses::composite_loss(&CompositeInputs {
                student_logits: &w_logits,
                teacher_logits: teacher.as_ref(),
                student_new_embeddings: &w_emb,
                student_exemplar_embeddings: w_ex_emb.as_ref(),
                new_classes: &labels,
                new_identities: &batch.identities,
                exemplar_identities: exemplar_ids,
                temperature: config.temperature,
                margin: config.margin,
                distill_columns,
            })?;
            check_finite(&w_loss.breakdown, "working", task, epoch)?;
            w_loss.total.backward()?;
            working_opt.step(gamma)?;
            working_means.add(&w_loss.breakdown);
            observer.observe(
                &StepEvent::AfterRehearsal {
                    task,
                    loss: &w_loss.breakdown,
                },
                &state.pair,
            );

            // Refreshing: update the memory model against the updated
            // working model.
            let mut m_breakdown = None;
            if strategy.refreshes_teacher() {
                let (m_emb, m_logits) = state.pair.memory.forward(&batch.inputs)?;
                let m_ex_emb = match &exemplars {
                    Some(b) => Some(state.pair.memory.embed(&b.inputs)?),
                    None => None,
                };
                let working_logits = state.pair.working.forward(&batch.inputs)?.1.stop_gradient();
                let m_loss = losses::composite_loss(&CompositeInputs {
                    student_logits: &m_logits,
                    teacher_logits: Some(&working_logits),
                    student_new_embeddings: &m_emb,
                    student_exemplar_embeddings: m_ex_emb.as_ref(),
                    new_classes: &labels,
                    new_identities: &batch.identities,
                    exemplar_identities: exemplar_ids,
                    temperature: config.temperature,
                    margin: config.margin,
                    distill_columns,
                })?;
                check_finite(&m_loss.breakdown, "memory", task, epoch)?;
                m_loss.total.backward()?;
                memory_opt.step(eta)?;
                memory_means.add(&m_loss.breakdown);
                observer.observe(
                    &StepEvent::AfterRefreshing {
                        task,
                        teacher_logits: &working_logits,
                        loss: &m_loss.breakdown,
                    },
                    &state.pair,
                );
                m_breakdown = Some(m_loss.breakdown);
            }
            state.steps.push(StepRecord {
                task,
                epoch,
                working: w_loss.breakdown,
                memory: m_breakdown,
            });
        }
        state.log.extend(working_means.entry(task, epoch, ModelRole::Working, gamma));
        state.log.extend(memory_means.entry(task, epoch, ModelRole::Memory, eta));
    }

    state.eval_model = if strategy.consolidation.feature_space() {
        EvalModel::Fused(state.pair.working.clone(), state.pair.memory.clone())
    } else {
        EvalModel::Single(state.pair.working.clone())
    };
    if strategy.consolidation.model_space() {
        state.pair.consolidate_model_space(task)?;
        if !strategy.consolidation.feature_space() {
            state.eval_model = EvalModel::Single(state.pair.working.clone());
        }
    } else {
        state.pair.sync_memory();
    }
    if strategy.use_exemplars {
        update_exemplars(&mut state, dataset, config)?;
    }
    state.elapsed += started.elapsed();
    Ok(state)
}

/// Single-task random-init accuracies used as forward-transfer references.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct References {
    pub map: Vec<Option<f64>>,
    pub rank1: Vec<Option<f64>>,
}

/// Trains a fresh model on each task `i >= 2` alone, with the same
/// initialization seed, epoch budget and working-model schedule as task `i`
/// of the lifelong run, and scores it on that task's test split.
pub fn compute_references(stream: &[TaskDataset], config: &TrainConfig) -> Result<References> {
    let mut refs = References {
        map: vec![None],
        rank1: vec![None],
    };
    for dataset in stream.iter().skip(1) {
        let mut state = RunState::new(config);
        state.register_classes(dataset, config.seed)?;
        let mut rng = sampling_rng(config, dataset.task);
        train_plain(
            &state.pair.working,
            &dataset.train,
            &state.label_map,
            dataset.task,
            (dataset.task, stream.len()),
            config,
            &mut rng,
            &mut Vec::new(),
            &mut Vec::new(),
        )?;
        let r = evaluate_task(&EvalModel::Single(state.pair.working), dataset)?;
        refs.map.push(Some(r.map));
        refs.rank1.push(Some(r.rank1));
    }
    Ok(refs)
}

/// Result of a full run: metrics, epoch log and one checkpoint per task.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: MetricsReport,
    pub log: Vec<EpochLog>,
    /// `(task, checkpoint text)` after each task boundary.
    pub checkpoints: Vec<(usize, String)>,
    pub elapsed: Duration,
}

fn score_row(model: &EvalModel, seen: &[TaskDataset]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut map = Vec::with_capacity(seen.len());
    let mut rank1 = Vec::with_capacity(seen.len());
    for task in seen {
        let r = evaluate_task(model, task)?;
        map.push(r.map);
        rank1.push(r.rank1);
    }
    Ok((map, rank1))
}

fn attach_references(report: &mut MetricsReport, references: Option<&References>, n: usize) {
    if let Some(r) = references {
        report.reference_map = r.map.iter().take(n).copied().collect();
        report.reference_rank1 = r.rank1.iter().take(n).copied().collect();
    }
}

/// Trains `stream` in order under `strategy` and fills one accuracy-matrix
/// row per task.
pub fn run_sequence(
    stream: &[TaskDataset],
    held_out: Option<&TaskDataset>,
    config: &TrainConfig,
    strategy: &Strategy,
    references: Option<&References>,
    observer: &mut dyn StepObserver,
) -> Result<RunOutcome> {
    let first = stream.first().ok_or(TrainError::EmptyStream)?;
    let n_tasks = stream.len();
    let mut report = MetricsReport::default();
    let mut checkpoints = Vec::with_capacity(n_tasks);

    let mut state = train_first_task(first, config)?;
    if !strategy.use_exemplars {
        state.memory = ExemplarMemory::new(config.exemplar_per_id, config.exemplar_max_ids);
    }
    let (map, rank1) = score_row(&state.eval_model, &stream[..1])?;
    report.push_step(map, rank1);
    checkpoints.push((first.task, state.pair.to_checkpoint()));

    for (i, dataset) in stream.iter().enumerate().skip(1) {
        state = train_task(dataset, state, config, strategy, n_tasks, observer)?;
        let (map, rank1) = score_row(&state.eval_model, &stream[..=i])?;
        report.push_step(map, rank1);
        checkpoints.push((dataset.task, state.pair.to_checkpoint()));
    }
    attach_references(&mut report, references, n_tasks);
    if let Some(h) = held_out {
        let r = evaluate_task(&state.eval_model, h)?;
        report.held_out = Some((r.map, r.rank1));
    }
    Ok(RunOutcome {
        report,
        log: state.log,
        checkpoints,
        elapsed: state.elapsed,
    })
}

/// Pools every task's training data and trains one model with the task-1
/// protocol. Every accuracy-matrix row is scored with that same model.
pub fn run_joint(
    stream: &[TaskDataset],
    held_out: Option<&TaskDataset>,
    config: &TrainConfig,
    references: Option<&References>,
) -> Result<RunOutcome> {
    let first = stream.first().ok_or(TrainError::EmptyStream)?;
    let pooled = pool_training_data(stream);
    let dataset = TaskDataset {
        task: 1,
        train: pooled,
        query: first.query.clone(),
        gallery: first.gallery.clone(),
        domain: first.domain.clone(),
    };
    let started = Instant::now();
    let mut state = RunState::new(config);
    state.register_classes(&dataset, config.seed)?;
    state.pair.task = 1;
    let mut rng = sampling_rng(config, 1);
    train_plain(
        &state.pair.working,
        &dataset.train,
        &state.label_map,
        1,
        (1, 1),
        config,
        &mut rng,
        &mut state.log,
        &mut state.steps,
    )?;
    state.pair.sync_memory();
    let model = EvalModel::Single(state.pair.working.clone());
    let mut report = MetricsReport::default();
    for i in 1..=stream.len() {
        let (map, rank1) = score_row(&model, &stream[..i])?;
        report.push_step(map, rank1);
    }
    attach_references(&mut report, references, stream.len());
    if let Some(h) = held_out {
        let r = evaluate_task(&model, h)?;
        report.held_out = Some((r.map, r.rank1));
    }
    Ok(RunOutcome {
        report,
        log: state.log,
        checkpoints: vec![(1, state.pair.to_checkpoint())],
        elapsed: started.elapsed(),
    })
}

/// Union of all training splits, rows ordered by identity then original
/// position so the result does not depend on task order.
pub fn pool_training_data(stream: &[TaskDataset]) -> SampleSet {
    let dim = stream.first().map_or(0, |d| d.train.dim);
    let mut rows: Vec<(usize, &[f64])> = stream
        .iter()
        .flat_map(|d| (0..d.train.len()).map(move |i| (d.train.identities[i], d.train.row(i))))
        .collect();
    rows.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.iter().map(|v| v.to_bits()).cmp(b.1.iter().map(|v| v.to_bits()))));
    let mut out = SampleSet::empty(dim);
    for (id, row) in rows {
        out.push(row, id);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let c = TrainConfig {
            rehearsal_lr: 3.5e-4,
            refresh_lr: 3.5e-5,
            refresh_lr_last: 3.5e-6,
            ..Default::default()
        };
        assert_eq!(lr_for(2, 4, 1, &c), (3.5e-4, 3.5e-5));
        assert_eq!(lr_for(4, 4, 1, &c).1, 3.5e-6);
        let (g, e) = lr_for(2, 4, 16, &c);
        assert!((g - 3.5e-5).abs() < 1e-18 && (e - 3.5e-6).abs() < 1e-18);
        assert_eq!(lr_for(2, 4, 15, &c), (3.5e-4, 3.5e-5));
        assert_eq!(lr_for(1, 4, 20, &c), (3.5e-4, 0.0));
        assert!((lr_for(1, 4, 21, &c).0 - 3.5e-5).abs() < 1e-18);
        let open = TrainConfig {
            open_ended: true,
            ..c
        };
        assert_eq!(lr_for(4, 4, 1, &open).1, 3.5e-5);
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        for bad in [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { rehearsal_lr: 0.0, ..Default::default() },
            TrainConfig { refresh_lr: -1.0, ..Default::default() },
            TrainConfig { decay_factor: 1.5, ..Default::default() },
            TrainConfig { k: 1, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
        }
    }

    #[test]
    fn batches_per_epoch_rounds_down_with_floor_of_one() {
        let c = TrainConfig::default();
        assert_eq!(batches_per_epoch(384, &c), 12);
        assert_eq!(batches_per_epoch(10, &c), 1);
    }
}
