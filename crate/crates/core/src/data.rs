//! Synthetic multi-domain identity streams, PK batch sampling, and the
//! exemplar memory.
//!
//! Every identity is a latent vector whose information lives in the first
//! `signal_dim` coordinates; the remaining coordinates carry only
//! within-identity nuisance noise. Each task (domain) applies its own random
//! orthogonal transform plus bias, so the identity subspace moves between
//! tasks by an amount controlled by `shift_scale`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{Model, ModelError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("infeasible stream config: {0}")]
    Config(String),
    #[error("need {needed} identities for a PK batch, source has {available}")]
    TooFewIdentities { needed: usize, available: usize },
    #[error("PK parameters must be positive (P={p}, K={k})")]
    BadPk { p: usize, k: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset file {file}: {reason}")]
    Format { file: String, reason: String },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Offset separating test identity ids from train identity ids.
pub const TEST_ID_BASE: usize = 1 << 20;

/// SplitMix64 finalizer over a base seed and a list of tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut z = base;
    for &t in tags {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(t.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Row-major feature matrix with one identity label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub dim: usize,
    pub features: Vec<f64>,
    pub identities: Vec<usize>,
}

impl SampleSet {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            features: Vec::new(),
            identities: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, features: &[f64], identity: usize) {
        debug_assert_eq!(features.len(), self.dim);
        self.features.extend_from_slice(features);
        self.identities.push(identity);
    }

    pub fn extend(&mut self, other: &SampleSet) {
        debug_assert_eq!(self.dim, other.dim);
        self.features.extend_from_slice(&other.features);
        self.identities.extend_from_slice(&other.identities);
    }

    /// Row indices grouped by identity, identities ascending.
    pub fn by_identity(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &id) in self.identities.iter().enumerate() {
            groups.entry(id).or_default().push(i);
        }
        groups
    }

    pub fn identity_set(&self) -> Vec<usize> {
        self.by_identity().into_keys().collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.features.clone(), &[self.len(), self.dim]).expect("consistent sample set")
    }

    pub fn select(&self, rows: &[usize]) -> SampleSet {
        let mut out = SampleSet::empty(self.dim);
        for &r in rows {
            out.push(self.row(r), self.identities[r]);
        }
        out
    }
}

/// Parameters of the per-task domain transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainDescriptor {
    pub seed: u64,
    pub shift_scale: f64,
}

/// One domain: labelled train split plus a disjoint-identity query/gallery
/// test split.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    /// 1-based position in the stream.
    pub task: usize,
    pub train: SampleSet,
    pub query: SampleSet,
    pub gallery: SampleSet,
    pub domain: DomainDescriptor,
}

impl TaskDataset {
    pub fn train_identities(&self) -> Vec<usize> {
        self.train.identity_set()
    }

    pub fn num_train_identities(&self) -> usize {
        self.train.by_identity().len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub n_tasks: usize,
    pub ids_per_task: usize,
    pub samples_per_id: usize,
    pub test_ids_per_task: usize,
    pub test_samples_per_id: usize,
    /// Samples per test identity used as queries; the rest form the gallery.
    pub queries_per_id: usize,
    pub input_dim: usize,
    /// Leading latent coordinates that carry identity information.
    pub signal_dim: usize,
    /// Within-identity noise std on the identity coordinates.
    pub noise_scale: f64,
    /// Nuisance-coordinate noise std, as a multiple of `noise_scale`.
    pub nuisance_ratio: f64,
    /// Strength of the per-task rotation and bias; 0 gives one shared domain.
    pub shift_scale: f64,
    /// Append a test-only domain that is never trained on.
    pub held_out_domain: bool,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            n_tasks: 4,
            ids_per_task: 32,
            samples_per_id: 12,
            test_ids_per_task: 16,
            test_samples_per_id: 10,
            queries_per_id: 5,
            input_dim: 32,
            signal_dim: 8,
            noise_scale: 0.4,
            nuisance_ratio: 4.0,
            shift_scale: 0.6,
            held_out_domain: false,
            seed: 0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(DataError::Config(m.to_owned()));
        if self.n_tasks == 0 {
            return fail("n_tasks must be >= 1");
        }
        if self.ids_per_task < 2 {
            return fail("ids_per_task must be >= 2");
        }
        if self.samples_per_id < 4 {
            return fail("samples_per_id must be >= 4");
        }
        if self.test_ids_per_task < 1 {
            return fail("test_ids_per_task must be >= 1");
        }
        if self.queries_per_id < 1 || self.queries_per_id >= self.test_samples_per_id {
            return fail("queries_per_id must be in [1, test_samples_per_id)");
        }
        if self.input_dim == 0 || self.signal_dim == 0 || self.signal_dim > self.input_dim {
            return fail("signal_dim must be in [1, input_dim]");
        }
        if !(self.noise_scale >= 0.0 && self.nuisance_ratio >= 0.0 && self.shift_scale >= 0.0) {
            return fail("noise and shift scales must be non-negative");
        }
        Ok(())
    }
}

struct Domain {
    rotation: DMatrix<f64>,
    bias: Vec<f64>,
}

impl Domain {
    /// Q from the QR factorization of `I + s G / sqrt(D)`, signs fixed so
    /// that `s = 0` gives the identity.
    fn new(dim: usize, shift: f64, rng: &mut ChaCha8Rng) -> Self {
        let scale = shift / (dim as f64).sqrt();
        let mut m = DMatrix::<f64>::identity(dim, dim);
        for v in m.iter_mut() {
            let g: f64 = StandardNormal.sample(rng);
            *v += scale * g;
        }
        let qr = m.qr();
        let (mut q, r) = (qr.q(), qr.r());
        for j in 0..dim {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        let bias = (0..dim)
            .map(|_| {
                let g: f64 = StandardNormal.sample(rng);
                shift * g
            })
            .collect();
        Self { rotation: q, bias }
    }

    fn apply(&self, latent: &[f64], out: &mut Vec<f64>) {
        let dim = latent.len();
        for i in 0..dim {
            let mut acc = self.bias[i];
            for (j, &l) in latent.iter().enumerate() {
                acc += self.rotation[(i, j)] * l;
            }
            out.push(acc);
        }
    }
}

fn identity_center(cfg: &StreamConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..cfg.input_dim)
        .map(|k| {
            if k < cfg.signal_dim {
                StandardNormal.sample(rng)
            } else {
                0.0
            }
        })
        .collect()
}

fn draw_samples(cfg: &StreamConfig, domain: &Domain, center: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let latent: Vec<f64> = center
                .iter()
                .enumerate()
                .map(|(k, &c)| {
                    let std = if k < cfg.signal_dim {
                        cfg.noise_scale
                    } else {
                        cfg.noise_scale * cfg.nuisance_ratio
                    };
                    let z: f64 = StandardNormal.sample(rng);
                    c + std * z
                })
                .collect();
            let mut x = Vec::with_capacity(cfg.input_dim);
            domain.apply(&latent, &mut x);
            x
        })
        .collect()
}

fn generate_task(cfg: &StreamConfig, task: usize, train: bool) -> TaskDataset {
    let domain_seed = derive_seed(cfg.seed, &[1, task as u64]);
    let mut domain_rng = ChaCha8Rng::seed_from_u64(domain_seed);
    let domain = Domain::new(cfg.input_dim, cfg.shift_scale, &mut domain_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2, task as u64]));

    let mut train_set = SampleSet::empty(cfg.input_dim);
    if train {
        for i in 0..cfg.ids_per_task {
            let id = (task - 1) * cfg.ids_per_task + i;
            let center = identity_center(cfg, &mut rng);
            for x in draw_samples(cfg, &domain, &center, cfg.samples_per_id, &mut rng) {
                train_set.push(&x, id);
            }
        }
    }
    let mut query = SampleSet::empty(cfg.input_dim);
    let mut gallery = SampleSet::empty(cfg.input_dim);
    for i in 0..cfg.test_ids_per_task {
        let id = TEST_ID_BASE + (task - 1) * cfg.test_ids_per_task + i;
        let center = identity_center(cfg, &mut rng);
        for (s, x) in draw_samples(cfg, &domain, &center, cfg.test_samples_per_id, &mut rng)
            .into_iter()
            .enumerate()
        {
            if s < cfg.queries_per_id {
                query.push(&x, id);
            } else {
                gallery.push(&x, id);
            }
        }
    }
    TaskDataset {
        task,
        train: train_set,
        query,
        gallery,
        domain: DomainDescriptor {
            seed: domain_seed,
            shift_scale: cfg.shift_scale,
        },
    }
}

/// Generates the task sequence; a pure function of `cfg`.
pub fn generate_stream(cfg: &StreamConfig) -> Result<Vec<TaskDataset>> {
    cfg.validate()?;
    Ok((1..=cfg.n_tasks).map(|t| generate_task(cfg, t, true)).collect())
}

/// Test-only domain placed after the last training task.
pub fn generate_held_out(cfg: &StreamConfig) -> Result<TaskDataset> {
    cfg.validate()?;
    Ok(generate_task(cfg, cfg.n_tasks + 1, false))
}

/// Where a batch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchSource {
    NewTask,
    Exemplar,
}

/// `P` identities x `K` instances, shuffled.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub identities: Vec<usize>,
    pub source: BatchSource,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }
}

/// Identity-balanced sampler over a [`SampleSet`].
#[derive(Debug, Clone)]
pub struct PkSampler<'a> {
    set: &'a SampleSet,
    groups: Vec<(usize, Vec<usize>)>,
    source: BatchSource,
}

impl<'a> PkSampler<'a> {
    pub fn new(set: &'a SampleSet, source: BatchSource) -> Self {
        Self {
            set,
            groups: set.by_identity().into_iter().collect(),
            source,
        }
    }

    pub fn num_identities(&self) -> usize {
        self.groups.len()
    }

    /// Identities are drawn without replacement. Within an identity, samples
    /// are drawn without replacement when it has at least `k`; otherwise its
    /// shuffled samples are cycled to fill `k` slots.
    pub fn sample(&self, p: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
        if p == 0 || k == 0 {
            return Err(DataError::BadPk { p, k });
        }
        if self.groups.len() < p {
            return Err(DataError::TooFewIdentities {
                needed: p,
                available: self.groups.len(),
            });
        }
        let mut rows = Vec::with_capacity(p * k);
        for gi in rand::seq::index::sample(rng, self.groups.len(), p) {
            let members = &self.groups[gi].1;
            if members.len() >= k {
                rows.extend(rand::seq::index::sample(rng, members.len(), k).into_iter().map(|i| members[i]));
            } else {
                let mut shuffled = members.clone();
                shuffled.shuffle(rng);
                rows.extend(shuffled.iter().cycle().take(k).copied());
            }
        }
        rows.shuffle(rng);
        let picked = self.set.select(&rows);
        Ok(Batch {
            inputs: picked.to_tensor(),
            identities: picked.identities,
            source: self.source,
        })
    }
}

/// Convenience wrapper around [`PkSampler`].
pub fn pk_sample(set: &SampleSet, source: BatchSource, p: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    PkSampler::new(set, source).sample(p, k, rng)
}

/// One stored sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub features: Vec<f64>,
    pub identity: usize,
    pub source_task: usize,
}

/// Replay buffer: at most `per_id` samples for each stored identity and at
/// most `max_ids` identities contributed by each task.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarMemory {
    pub per_id: usize,
    pub max_ids: usize,
    entries: BTreeMap<usize, Vec<Exemplar>>,
}

impl ExemplarMemory {
    pub fn new(per_id: usize, max_ids: usize) -> Self {
        Self {
            per_id,
            max_ids,
            entries: BTreeMap::new(),
        }
    }

    /// Stored sample count.
    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&usize, &Vec<Exemplar>)> {
        self.entries.iter()
    }

    pub fn source_tasks(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.entries.values().flatten().map(|e| e.source_task).collect();
        t.sort_unstable();
        t.dedup();
        t
    }

    pub fn add(&mut self, additions: Vec<Exemplar>) {
        for e in additions {
            let slot = self.entries.entry(e.identity).or_default();
            if slot.len() < self.per_id {
                slot.push(e);
            }
        }
    }

    pub fn to_sample_set(&self, dim: usize) -> SampleSet {
        let mut set = SampleSet::empty(dim);
        for e in self.entries.values().flatten() {
            set.push(&e.features, e.identity);
        }
        set
    }
}

/// Indices of the `k` rows farthest (Euclidean) from the rows' centroid,
/// farthest first; ties keep the lower index. Returns every index when there
/// are at most `k` rows.
pub fn farthest_from_centroid(rows: &[Vec<f64>], k: usize) -> Vec<usize> {
    if rows.len() <= k {
        return (0..rows.len()).collect();
    }
    let dim = rows[0].len();
    let mut centroid = vec![0.0; dim];
    for r in rows {
        centroid.iter_mut().zip(r).for_each(|(c, v)| *c += v);
    }
    centroid.iter_mut().for_each(|c| *c /= rows.len() as f64);
    let dist: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().zip(&centroid).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Chooses exemplars for one finished task using `model`'s embeddings.
///
/// When the task has more than `max_ids` identities a seeded uniform subset
/// is kept.
pub fn select_exemplars(
    model: &Model,
    dataset: &TaskDataset,
    per_id: usize,
    max_ids: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Exemplar>> {
    let groups: Vec<(usize, Vec<usize>)> = dataset.train.by_identity().into_iter().collect();
    let chosen: Vec<usize> = if groups.len() > max_ids {
        let mut idx = rand::seq::index::sample(rng, groups.len(), max_ids).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..groups.len()).collect()
    };
    let embeddings = model.embed(&dataset.train.to_tensor())?;
    let emb = embeddings.data();
    let d = embeddings.cols();
    let mut out = Vec::new();
    for gi in chosen {
        let (identity, members) = &groups[gi];
        let rows: Vec<Vec<f64>> = members.iter().map(|&r| emb[r * d..(r + 1) * d].to_vec()).collect();
        for local in farthest_from_centroid(&rows, per_id) {
            out.push(Exemplar {
                features: dataset.train.row(members[local]).to_vec(),
                identity: *identity,
                source_task: dataset.task,
            });
        }
    }
    Ok(out)
}

const SPLITS: [&str; 3] = ["train", "query", "gallery"];

/// Writes `train.csv`, `query.csv` and `gallery.csv` into `dir`.
///
/// Columns: `task_id, identity_id, split, f0 .. f{D-1}`.
pub fn export_stream_csv(datasets: &[TaskDataset], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let dim = datasets.first().map_or(0, |d| d.train.dim);
    for split in SPLITS {
        let mut w = csv::Writer::from_path(dir.join(format!("{split}.csv")))?;
        let mut header = vec!["task_id".to_owned(), "identity_id".to_owned(), "split".to_owned()];
        header.extend((0..dim).map(|i| format!("f{i}")));
        w.write_record(&header)?;
        for ds in datasets {
            let set = match split {
                "train" => &ds.train,
                "query" => &ds.query,
                _ => &ds.gallery,
            };
            for i in 0..set.len() {
                let mut rec = vec![ds.task.to_string(), set.identities[i].to_string(), split.to_owned()];
                rec.extend(set.row(i).iter().map(|v| format!("{v:?}")));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

/// Reads a directory written by [`export_stream_csv`]. Domain descriptors are
/// not part of the file format and come back zeroed.
pub fn import_stream_csv(dir: &Path) -> Result<Vec<TaskDataset>> {
    let mut tasks: BTreeMap<usize, TaskDataset> = BTreeMap::new();
    for split in SPLITS {
        let file = dir.join(format!("{split}.csv"));
        let fname = file.display().to_string();
        let bad = |reason: String| DataError::Format {
            file: fname.clone(),
            reason,
        };
        let mut r = csv::Reader::from_path(&file)?;
        let header = r.headers()?.clone();
        if header.len() < 4 || &header[0] != "task_id" || &header[1] != "identity_id" || &header[2] != "split" {
            return Err(bad("header must start with task_id,identity_id,split".into()));
        }
        let dim = header.len() - 3;
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let row = line + 2;
            let task: usize = rec[0].parse().map_err(|_| bad(format!("row {row}: bad task_id")))?;
            let id: usize = rec[1].parse().map_err(|_| bad(format!("row {row}: bad identity_id")))?;
            if &rec[2] != split {
                return Err(bad(format!("row {row}: split `{}` in {split}.csv", &rec[2])));
            }
            let x = (3..rec.len())
                .map(|c| rec[c].parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad(format!("row {row}: bad feature")))?;
            let ds = tasks.entry(task).or_insert_with(|| TaskDataset {
                task,
                train: SampleSet::empty(dim),
                query: SampleSet::empty(dim),
                gallery: SampleSet::empty(dim),
                domain: DomainDescriptor {
                    seed: 0,
                    shift_scale: 0.0,
                },
            });
            let set = match split {
                "train" => &mut ds.train,
                "query" => &mut ds.query,
                _ => &mut ds.gallery,
            };
            set.push(&x, id);
        }
    }
    Ok(tasks.into_values().collect())
}
