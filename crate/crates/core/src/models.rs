//! Feature extractor, expanding classifier, and the working/memory model pair.

use std::fmt::Write as _;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input has {got} features, extractor expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("classifier expansion needs at least one new class")]
    EmptyExpansion,
    #[error("model-space consolidation needs t >= 1, got {0}")]
    BadTaskIndex(usize),
    #[error("checkpoint parse error at line {line}: {reason}")]
    Checkpoint { line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Layer widths of the extractor: input, hidden layers, embedding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden: vec![64, 64],
            embedding_dim: 32,
        }
    }
}

impl Architecture {
    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend(&self.hidden);
        w.push(self.embedding_dim);
        w
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// Affine layer `x W + b` with `W` stored as `[in, out]`.
#[derive(Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: Tensor::param(uniform(rng, inputs * outputs, bound), &[inputs, outputs])
                .expect("shape matches data"),
            bias: Tensor::param(uniform(rng, outputs, bound), &[outputs]).expect("shape matches data"),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight)?.add_bias(&self.bias)?)
    }
}

impl Clone for Linear {
    fn clone(&self) -> Self {
        Self {
            weight: self.weight.deep_copy(),
            bias: self.bias.deep_copy(),
        }
    }
}

/// Plain MLP: affine + ReLU on hidden layers, affine embedding head.
///
/// There are no normalization layers, so parameter averaging is well defined.
#[derive(Debug, Clone)]
pub struct Extractor {
    arch: Architecture,
    layers: Vec<Linear>,
}

impl Extractor {
    pub fn new(arch: &Architecture, rng: &mut ChaCha8Rng) -> Self {
        let widths = arch.widths();
        let layers = widths.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Self {
            arch: arch.clone(),
            layers,
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.arch.input_dim {
            return Err(ModelError::InputDim {
                expected: self.arch.input_dim,
                got: x.cols(),
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    fn parameters(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }
}

/// Classes owned by one task in the unified head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRange {
    pub task: usize,
    pub start: usize,
    pub end: usize,
}

impl ClassRange {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

/// Linear head over every class seen so far; grows by appending columns.
#[derive(Debug)]
pub struct Classifier {
    embedding_dim: usize,
    weight: Tensor,
    bias: Tensor,
    ranges: Vec<ClassRange>,
}

impl Clone for Classifier {
    fn clone(&self) -> Self {
        Self {
            embedding_dim: self.embedding_dim,
            weight: self.weight.deep_copy(),
            bias: self.bias.deep_copy(),
            ranges: self.ranges.clone(),
        }
    }
}

impl Classifier {
    pub fn empty(embedding_dim: usize) -> Self {
        Self {
            embedding_dim,
            weight: Tensor::param(Vec::new(), &[embedding_dim, 0]).expect("empty"),
            bias: Tensor::param(Vec::new(), &[0]).expect("empty"),
            ranges: Vec::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.numel()
    }

    pub fn ranges(&self) -> &[ClassRange] {
        &self.ranges
    }

    pub fn range_for(&self, task: usize) -> Option<Range<usize>> {
        self.ranges.iter().find(|r| r.task == task).map(ClassRange::range)
    }

    /// Uniform draws in `[-1/sqrt(D_emb), 1/sqrt(D_emb)]`, row-major `[D_emb, n]`.
    fn new_columns(embedding_dim: usize, n_new: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform(&mut rng, embedding_dim * n_new, 1.0 / (embedding_dim as f64).sqrt())
    }

    fn append(&mut self, task: usize, columns: &[f64]) {
        let d = self.embedding_dim;
        let old_c = self.num_classes();
        let n_new = columns.len() / d;
        let new_c = old_c + n_new;
        let old_w = self.weight.to_vec();
        let mut w = Vec::with_capacity(d * new_c);
        for r in 0..d {
            w.extend_from_slice(&old_w[r * old_c..(r + 1) * old_c]);
            w.extend_from_slice(&columns[r * n_new..(r + 1) * n_new]);
        }
        let mut b = self.bias.to_vec();
        b.resize(new_c, 0.0);
        self.weight = Tensor::param(w, &[d, new_c]).expect("shape matches data");
        self.bias = Tensor::param(b, &[new_c]).expect("shape matches data");
        self.ranges.push(ClassRange {
            task,
            start: old_c,
            end: new_c,
        });
    }

    pub fn forward(&self, embeddings: &Tensor) -> Result<Tensor> {
        Ok(embeddings.matmul(&self.weight)?.add_bias(&self.bias)?)
    }
}

/// Extractor plus classifier; one of the two models in a [`ModelPair`].
#[derive(Debug, Clone)]
pub struct Model {
    pub extractor: Extractor,
    pub classifier: Classifier,
}

impl Model {
    pub fn new(arch: &Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            extractor: Extractor::new(arch, &mut rng),
            classifier: Classifier::empty(arch.embedding_dim),
        }
    }

    pub fn architecture(&self) -> &Architecture {
        self.extractor.architecture()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    /// Returns `(embeddings [N, D_emb], logits [N, C_total])`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let embeddings = self.extractor.forward(x)?;
        let logits = self.classifier.forward(&embeddings)?;
        Ok((embeddings, logits))
    }

    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.extractor.forward(x)
    }

    /// Appends `n_new` seeded columns for `task`.
    pub fn expand_classifier(&mut self, task: usize, n_new: usize, seed: u64) -> Result<()> {
        if n_new == 0 {
            return Err(ModelError::EmptyExpansion);
        }
        let cols = Classifier::new_columns(self.classifier.embedding_dim, n_new, seed);
        self.classifier.append(task, &cols);
        Ok(())
    }

    /// Trainable tensors in a fixed order: extractor layers, then head.
    pub fn parameters(&self) -> Vec<Tensor> {
        self.extractor
            .parameters()
            .chain([&self.classifier.weight, &self.classifier.bias])
            .cloned()
            .collect()
    }

    fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.extractor.layers.iter().enumerate() {
            out.push((format!("extractor.{i}.weight"), l.weight.clone()));
            out.push((format!("extractor.{i}.bias"), l.bias.clone()));
        }
        out.push(("classifier.weight".into(), self.classifier.weight.clone()));
        out.push(("classifier.bias".into(), self.classifier.bias.clone()));
        out
    }

    pub fn zero_grad(&self) {
        self.parameters().iter().for_each(Tensor::zero_grad);
    }

    /// Bitwise equality of architecture, class layout and every parameter.
    pub fn bit_equal(&self, other: &Model) -> bool {
        self.architecture() == other.architecture()
            && self.classifier.ranges == other.classifier.ranges
            && self
                .parameters()
                .iter()
                .zip(other.parameters().iter())
                .all(|(a, b)| {
                    a.shape() == b.shape()
                        && a.data().iter().zip(b.data().iter()).all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }

    fn ensure_compatible(&self, other: &Model) -> Result<()> {
        if self.architecture() != other.architecture() || self.num_classes() != other.num_classes() {
            return Err(ModelError::Architecture(format!(
                "{:?}/{} classes vs {:?}/{} classes",
                self.architecture(),
                self.num_classes(),
                other.architecture(),
                other.num_classes()
            )));
        }
        Ok(())
    }
}

/// Independent deep copy of a model.
pub fn clone_model(src: &Model) -> Model {
    src.clone()
}

/// Mixing weights `(1/(t+1), t/(t+1))` for working and memory parameters.
pub fn consolidation_weights(t: usize) -> (f64, f64) {
    let t = t as f64;
    (1.0 / (t + 1.0), t / (t + 1.0))
}

/// Working model (plastic) and memory model (slow teacher).
#[derive(Debug, Clone)]
pub struct ModelPair {
    pub working: Model,
    pub memory: Model,
    /// Index of the task currently being (or last) trained, 1-based.
    pub task: usize,
}

impl ModelPair {
    /// Both models start from the same seeded initialization.
    pub fn new(arch: &Architecture, seed: u64) -> Self {
        let working = Model::new(arch, seed);
        let memory = working.clone();
        Self {
            working,
            memory,
            task: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        debug_assert_eq!(self.working.num_classes(), self.memory.num_classes());
        self.working.num_classes()
    }

    /// Grows both heads by the same `n_new` seeded columns.
    pub fn expand_classifier(&mut self, task: usize, n_new: usize, seed: u64) -> Result<()> {
        self.working.expand_classifier(task, n_new, seed)?;
        self.memory.expand_classifier(task, n_new, seed)
    }

    /// Overwrites the memory model with a copy of the working model.
    pub fn sync_memory(&mut self) {
        self.memory = self.working.clone();
    }

    /// Replaces working parameters by `Θw/(t+1) + tΘm/(t+1)`, then re-seeds
    /// the memory model from the result.
    pub fn consolidate_model_space(&mut self, t: usize) -> Result<()> {
        if t == 0 {
            return Err(ModelError::BadTaskIndex(t));
        }
        self.working.ensure_compatible(&self.memory)?;
        let (w_weight, _) = consolidation_weights(t);
        for (w, m) in self.working.parameters().iter().zip(self.memory.parameters().iter()) {
            let m = m.data();
            let mut w = w.data_mut();
            // m + a (w - m): identical to a w + (1 - a) m, and exact when w == m.
            for (wi, &mi) in w.iter_mut().zip(m.iter()) {
                *wi = mi + w_weight * (*wi - mi);
            }
        }
        self.sync_memory();
        Ok(())
    }

    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        let arch = self.working.architecture();
        let _ = writeln!(out, "krkc-checkpoint 1");
        let hidden: Vec<String> = arch.hidden.iter().map(usize::to_string).collect();
        let _ = writeln!(
            out,
            "arch {} [{}] {}",
            arch.input_dim,
            hidden.join(","),
            arch.embedding_dim
        );
        let _ = writeln!(out, "task {}", self.task);
        let _ = writeln!(out, "classes {}", self.num_classes());
        let ranges: Vec<String> = self
            .working
            .classifier
            .ranges
            .iter()
            .map(|r| format!("{}:{}..{}", r.task, r.start, r.end))
            .collect();
        let _ = writeln!(out, "ranges {}", ranges.join(" "));
        for (role, model) in [("working", &self.working), ("memory", &self.memory)] {
            for (name, t) in model.named_parameters() {
                let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
                let _ = writeln!(out, "param {role}.{name} {}", dims.join(" "));
                let values: Vec<String> = t.data().iter().map(|v| format!("{v:?}")).collect();
                let _ = writeln!(out, "{}", values.join(" "));
            }
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let mut next = |expect: &str| -> Result<(usize, Vec<String>)> {
            let (i, line) = lines.next().ok_or(ModelError::Checkpoint {
                line: 0,
                reason: format!("unexpected end of file, expected {expect}"),
            })?;
            let fields: Vec<String> = line.split_whitespace().map(str::to_owned).collect();
            if !expect.is_empty() && fields.first().map(String::as_str) != Some(expect) {
                return Err(ModelError::Checkpoint {
                    line: i + 1,
                    reason: format!("expected `{expect}`"),
                });
            }
            Ok((i + 1, fields))
        };
        let bad = |line: usize, reason: &str| ModelError::Checkpoint {
            line,
            reason: reason.to_owned(),
        };
        let num = |line: usize, s: &str| s.parse::<usize>().map_err(|_| bad(line, "bad integer"));

        let (l, header) = next("krkc-checkpoint")?;
        if header.get(1).map(String::as_str) != Some("1") {
            return Err(bad(l, "unsupported version"));
        }
        let (l, arch_f) = next("arch")?;
        if arch_f.len() != 4 {
            return Err(bad(l, "arch needs input, [hidden], embedding"));
        }
        let hidden_s = arch_f[2].trim_start_matches('[').trim_end_matches(']');
        let hidden = if hidden_s.is_empty() {
            Vec::new()
        } else {
            hidden_s.split(',').map(|s| num(l, s)).collect::<Result<Vec<_>>>()?
        };
        let arch = Architecture {
            input_dim: num(l, &arch_f[1])?,
            hidden,
            embedding_dim: num(l, &arch_f[3])?,
        };
        let (l, task_f) = next("task")?;
        let task = num(l, task_f.get(1).ok_or_else(|| bad(l, "missing task"))?)?;
        let (l, classes_f) = next("classes")?;
        let classes = num(l, classes_f.get(1).ok_or_else(|| bad(l, "missing classes"))?)?;
        let (l, ranges_f) = next("ranges")?;
        let mut ranges = Vec::new();
        for r in &ranges_f[1..] {
            let (task, span) = r.split_once(':').ok_or_else(|| bad(l, "bad range"))?;
            let (start, end) = span.split_once("..").ok_or_else(|| bad(l, "bad range"))?;
            ranges.push(ClassRange {
                task: num(l, task)?,
                start: num(l, start)?,
                end: num(l, end)?,
            });
        }

        let mut pair = ModelPair::new(&arch, 0);
        pair.task = task;
        for model in [&mut pair.working, &mut pair.memory] {
            model.classifier.ranges = ranges.clone();
            model.classifier.weight = Tensor::param(vec![0.0; arch.embedding_dim * classes], &[arch.embedding_dim, classes])?;
            model.classifier.bias = Tensor::param(vec![0.0; classes], &[classes])?;
        }
        for role in ["working", "memory"] {
            let model = if role == "working" { &pair.working } else { &pair.memory };
            for (name, t) in model.named_parameters() {
                let (l, f) = next("param")?;
                if f.get(1).map(String::as_str) != Some(&format!("{role}.{name}")) {
                    return Err(bad(l, &format!("expected parameter {role}.{name}")));
                }
                let dims = f[2..].iter().map(|s| num(l, s)).collect::<Result<Vec<_>>>()?;
                if dims != t.shape() {
                    return Err(bad(l, "parameter shape mismatch"));
                }
                let (l, values) = next("")?;
                if values.len() != t.numel() {
                    return Err(bad(l, "wrong number of values"));
                }
                let mut data = t.data_mut();
                for (slot, v) in data.iter_mut().zip(&values) {
                    *slot = v.parse::<f64>().map_err(|_| bad(l, "bad float"))?;
                }
            }
        }
        Ok(pair)
    }
}
