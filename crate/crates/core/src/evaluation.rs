//! Open-set retrieval scoring and lifelong transfer metrics.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{SampleSet, TaskDataset};
use crate::models::{Model, ModelError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("query identity {0} has no match in the gallery")]
    QueryWithoutMatch(usize),
    #[error("feature dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("{0} labels for {1} feature rows")]
    LabelCount(usize, usize),
    #[error("accuracy matrix row {row} has {got} entries, expected {expected}")]
    IncompleteRow { row: usize, got: usize, expected: usize },
    #[error("transfer metrics need at least two tasks, got {0}")]
    TooFewTasks(usize),
    #[error("missing reference accuracy for task {0}")]
    MissingReference(usize),
    #[error("accuracy matrix is empty")]
    Empty,
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Row-major feature matrix ready for retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// L2-normalized embeddings of `working`, concatenated with the
/// L2-normalized embeddings of `memory` when one is given (fused retrieval).
pub fn extract_features(working: &Model, memory: Option<&Model>, samples: &SampleSet) -> Result<Features> {
    let x = samples.to_tensor();
    let mut feats = working.embed(&x).and_then(|e| Ok(e.l2_normalize_rows()?))?;
    if let Some(memory) = memory {
        let (a, b) = (working.architecture().embedding_dim, memory.architecture().embedding_dim);
        if a != b {
            return Err(EvalError::Dimension(a, b));
        }
        let m = memory.embed(&x).and_then(|e| Ok(e.l2_normalize_rows()?))?;
        feats = feats.concat_cols(&m).map_err(ModelError::from)?;
    }
    Ok(Features {
        dim: feats.cols(),
        data: feats.to_vec(),
    })
}

/// The model(s) used to embed test samples after a task.
#[derive(Debug, Clone)]
pub enum EvalModel {
    Single(Model),
    /// Working and memory embeddings concatenated.
    Fused(Model, Model),
}

impl EvalModel {
    pub fn features(&self, samples: &SampleSet) -> Result<Features> {
        match self {
            EvalModel::Single(m) => extract_features(m, None, samples),
            EvalModel::Fused(w, m) => extract_features(w, Some(m), samples),
        }
    }

    pub fn is_fused(&self) -> bool {
        matches!(self, EvalModel::Fused(..))
    }
}

/// Per-query rankings and aggregate scores.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    /// Gallery indices by ascending distance (ties by index), one per query.
    pub rankings: Vec<Vec<usize>>,
    pub average_precision: Vec<f64>,
    pub map: f64,
    /// `cmc[r]` = fraction of queries with a match within the top `r + 1`.
    pub cmc: Vec<f64>,
    pub rank1: f64,
}

/// Average precision of one ranked list given which positions match.
pub fn average_precision(matches: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (k, &m) in matches.iter().enumerate() {
        if m {
            hits += 1;
            total += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        total / hits as f64
    }
}

/// Euclidean ranking of the gallery for each query, scored by mAP and CMC.
pub fn retrieve_and_score(
    query: &Features,
    gallery: &Features,
    query_ids: &[usize],
    gallery_ids: &[usize],
) -> Result<RetrievalResult> {
    if query.dim != gallery.dim {
        return Err(EvalError::Dimension(query.dim, gallery.dim));
    }
    if query_ids.len() != query.len() {
        return Err(EvalError::LabelCount(query_ids.len(), query.len()));
    }
    if gallery_ids.len() != gallery.len() {
        return Err(EvalError::LabelCount(gallery_ids.len(), gallery.len()));
    }
    let known: BTreeSet<usize> = gallery_ids.iter().copied().collect();
    if let Some(&missing) = query_ids.iter().find(|id| !known.contains(id)) {
        return Err(EvalError::QueryWithoutMatch(missing));
    }

    let n_gallery = gallery.len();
    let mut rankings = Vec::with_capacity(query.len());
    let mut aps = Vec::with_capacity(query.len());
    let mut first_hit_counts = vec![0usize; n_gallery];
    for (qi, &qid) in query_ids.iter().enumerate() {
        let q = query.row(qi);
        let dist: Vec<f64> = (0..n_gallery)
            .map(|g| gallery.row(g).iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect();
        let mut order: Vec<usize> = (0..n_gallery).collect();
        order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
        let matches: Vec<bool> = order.iter().map(|&g| gallery_ids[g] == qid).collect();
        aps.push(average_precision(&matches));
        if let Some(first) = matches.iter().position(|&m| m) {
            first_hit_counts[first] += 1;
        }
        rankings.push(order);
    }
    let nq = query.len().max(1) as f64;
    let mut cmc = Vec::with_capacity(n_gallery);
    let mut acc = 0usize;
    for c in first_hit_counts {
        acc += c;
        cmc.push(acc as f64 / nq);
    }
    let map = aps.iter().sum::<f64>() / nq;
    let rank1 = cmc.first().copied().unwrap_or(0.0);
    Ok(RetrievalResult {
        rankings,
        average_precision: aps,
        map,
        cmc,
        rank1,
    })
}

/// Scores `model` on a task's query/gallery split.
pub fn evaluate_task(model: &EvalModel, task: &TaskDataset) -> Result<RetrievalResult> {
    let q = model.features(&task.query)?;
    let g = model.features(&task.gallery)?;
    retrieve_and_score(&q, &g, &task.query.identities, &task.gallery.identities)
}

/// Lower-triangular matrix: `rows[i][j]` is the accuracy on task `j + 1`
/// after training task `i + 1`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        Self { rows }
    }

    pub fn num_steps(&self) -> usize {
        self.rows.len()
    }

    /// 1-based accessor.
    pub fn get(&self, step: usize, task: usize) -> Option<f64> {
        self.rows.get(step.checked_sub(1)?)?.get(task.checked_sub(1)?).copied()
    }

    fn check_complete(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(EvalError::Empty);
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(EvalError::IncompleteRow {
                    row: i + 1,
                    got: row.len(),
                    expected: i + 1,
                });
            }
        }
        Ok(())
    }

    fn diag(&self, i: usize) -> f64 {
        self.rows[i - 1][i - 1]
    }
}

/// Mean of the final row.
pub fn average_incremental_accuracy(r: &AccuracyMatrix) -> Result<f64> {
    r.check_complete()?;
    let last = r.rows.last().expect("non-empty");
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BwtMode {
    /// `1/(T-1) * sum_{i=1}^{T-1} 1/i * sum_{j=1}^{i} (R[i][j] - R[j][j])`.
    Paper,
    /// `1/(T-1) * sum_{j=1}^{T-1} (R[T][j] - R[j][j])`.
    FinalRow,
}

pub fn backward_transfer(r: &AccuracyMatrix, mode: BwtMode) -> Result<f64> {
    r.check_complete()?;
    let t = r.num_steps();
    if t < 2 {
        return Err(EvalError::TooFewTasks(t));
    }
    let total: f64 = match mode {
        BwtMode::Paper => (1..t)
            .map(|i| (1..=i).map(|j| r.rows[i - 1][j - 1] - r.diag(j)).sum::<f64>() / i as f64)
            .sum(),
        BwtMode::FinalRow => (1..t).map(|j| r.rows[t - 1][j - 1] - r.diag(j)).sum(),
    };
    Ok(total / (t - 1) as f64)
}

/// `1/(T-1) * sum_{i=2}^{T} (R[i][i] - reference[i])`, where `reference[i-1]`
/// is the accuracy of a model trained on task `i` alone from random init.
/// `reference[0]` is ignored.
pub fn forward_transfer(r: &AccuracyMatrix, reference: &[Option<f64>]) -> Result<f64> {
    r.check_complete()?;
    let t = r.num_steps();
    if t < 2 {
        return Err(EvalError::TooFewTasks(t));
    }
    let mut total = 0.0;
    for i in 2..=t {
        let reference = reference
            .get(i - 1)
            .copied()
            .flatten()
            .ok_or(EvalError::MissingReference(i))?;
        total += r.diag(i) - reference;
    }
    Ok(total / (t - 1) as f64)
}

/// Accuracy matrices for both metrics plus references and optional held-out
/// scores.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: AccuracyMatrix,
    pub rank1: AccuracyMatrix,
    /// Single-task random-init accuracies, indexed by task - 1; `None` for
    /// task 1.
    pub reference_map: Vec<Option<f64>>,
    pub reference_rank1: Vec<Option<f64>>,
    pub held_out: Option<(f64, f64)>,
}

/// Headline numbers derived from a [`MetricsReport`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub avg_incremental_map: f64,
    pub avg_incremental_rank1: f64,
    pub bwt_paper: Option<f64>,
    pub bwt_final_row: Option<f64>,
    pub fwt: Option<f64>,
    pub bwt_paper_map: Option<f64>,
    pub bwt_final_row_map: Option<f64>,
    pub fwt_map: Option<f64>,
}

impl MetricsReport {
    pub fn push_step(&mut self, map_row: Vec<f64>, rank1_row: Vec<f64>) {
        self.map.rows.push(map_row);
        self.rank1.rows.push(rank1_row);
    }

    /// Transfer metrics are `None` for single-task runs or when references
    /// are missing. BWT and FWT headline values are in Rank-1.
    pub fn summary(&self) -> Result<Summary> {
        let multi = self.rank1.num_steps() >= 2;
        let opt = |v: Result<f64>| if multi { v.ok() } else { None };
        Ok(Summary {
            avg_incremental_map: average_incremental_accuracy(&self.map)?,
            avg_incremental_rank1: average_incremental_accuracy(&self.rank1)?,
            bwt_paper: opt(backward_transfer(&self.rank1, BwtMode::Paper)),
            bwt_final_row: opt(backward_transfer(&self.rank1, BwtMode::FinalRow)),
            fwt: opt(forward_transfer(&self.rank1, &self.reference_rank1)),
            bwt_paper_map: opt(backward_transfer(&self.map, BwtMode::Paper)),
            bwt_final_row_map: opt(backward_transfer(&self.map, BwtMode::FinalRow)),
            fwt_map: opt(forward_transfer(&self.map, &self.reference_map)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn feats(rows: &[&[f64]]) -> Features {
        Features {
            dim: rows[0].len(),
            data: rows.iter().flat_map(|r| r.to_vec()).collect(),
        }
    }

    #[test]
    fn perfect_separation_scores_one() {
        let g = feats(&[&[0.0, 0.0], &[0.1, 0.0], &[5.0, 5.0], &[5.1, 5.0]]);
        let q = feats(&[&[0.05, 0.0], &[5.05, 5.0]]);
        let r = retrieve_and_score(&q, &g, &[1, 2], &[1, 1, 2, 2]).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.rank1, 1.0);
        assert_eq!(*r.cmc.last().unwrap(), 1.0);
    }

    #[test]
    fn hand_example_average_precision() {
        // One query, matches at ranks 1 and 3 of 5.
        let g = feats(&[&[1.0], &[2.0], &[3.0], &[4.0], &[5.0]]);
        let q = feats(&[&[0.0]]);
        let r = retrieve_and_score(&q, &g, &[7], &[7, 8, 7, 9, 9]).unwrap();
        assert_abs_diff_eq!(r.map, 0.5 * (1.0 + 2.0 / 3.0), epsilon = 1e-15);
        assert_abs_diff_eq!(r.map, 0.8333, epsilon = 1e-4);
        assert_eq!(r.rankings[0], vec![0, 1, 2, 3, 4]);
        assert_eq!(r.rank1, 1.0);
    }

    #[test]
    fn query_without_match_is_an_error() {
        let g = feats(&[&[1.0]]);
        let q = feats(&[&[0.0]]);
        assert!(matches!(
            retrieve_and_score(&q, &g, &[3], &[4]),
            Err(EvalError::QueryWithoutMatch(3))
        ));
    }

    #[test]
    fn average_incremental_examples() {
        let r = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.8, 0.6]]);
        assert_abs_diff_eq!(average_incremental_accuracy(&r).unwrap(), 0.7, epsilon = 1e-15);
        let c = AccuracyMatrix::from_rows(vec![vec![0.4], vec![0.4, 0.4], vec![0.4, 0.4, 0.4]]);
        assert_abs_diff_eq!(average_incremental_accuracy(&c).unwrap(), 0.4, epsilon = 1e-15);
        let one = AccuracyMatrix::from_rows(vec![vec![0.3]]);
        assert_eq!(average_incremental_accuracy(&one).unwrap(), 0.3);
        let broken = AccuracyMatrix::from_rows(vec![vec![0.3], vec![0.2]]);
        assert!(matches!(
            average_incremental_accuracy(&broken),
            Err(EvalError::IncompleteRow { row: 2, .. })
        ));
    }

    #[test]
    fn bwt_two_task_example() {
        let r = AccuracyMatrix::from_rows(vec![vec![0.8], vec![0.7, 0.9]]);
        assert_eq!(backward_transfer(&r, BwtMode::Paper).unwrap(), 0.0);
        assert_abs_diff_eq!(backward_transfer(&r, BwtMode::FinalRow).unwrap(), -0.1, epsilon = 1e-15);
        let improving = AccuracyMatrix::from_rows(vec![vec![0.6], vec![0.7, 0.9]]);
        assert!(backward_transfer(&improving, BwtMode::FinalRow).unwrap() > 0.0);
        let single = AccuracyMatrix::from_rows(vec![vec![0.6]]);
        assert!(matches!(backward_transfer(&single, BwtMode::Paper), Err(EvalError::TooFewTasks(1))));
    }

    #[test]
    fn bwt_paper_mode_uses_inner_rows() {
        let r = AccuracyMatrix::from_rows(vec![vec![0.5], vec![0.6, 0.7], vec![0.1, 0.2, 0.3]]);
        // i = 1: 0; i = 2: ((0.6-0.5) + (0.7-0.7)) / 2 = 0.05; divided by T-1 = 2.
        assert_abs_diff_eq!(backward_transfer(&r, BwtMode::Paper).unwrap(), 0.025, epsilon = 1e-15);
        // Final row: ((0.1-0.5) + (0.2-0.7)) / 2 = -0.45.
        assert_abs_diff_eq!(backward_transfer(&r, BwtMode::FinalRow).unwrap(), -0.45, epsilon = 1e-15);
    }

    #[test]
    fn fwt_examples() {
        let r = AccuracyMatrix::from_rows(vec![vec![0.5], vec![0.5, 0.6], vec![0.5, 0.6, 0.2]]);
        let same = vec![None, Some(0.6), Some(0.2)];
        assert_eq!(forward_transfer(&r, &same).unwrap(), 0.0);
        let refs = vec![None, Some(0.5), Some(0.5)];
        assert_abs_diff_eq!(forward_transfer(&r, &refs).unwrap(), -0.1, epsilon = 1e-15);
        assert!(matches!(
            forward_transfer(&r, &[None, Some(0.5)]),
            Err(EvalError::MissingReference(3))
        ));
    }

    #[test]
    fn constant_matrix_has_zero_transfer() {
        let r = AccuracyMatrix::from_rows(vec![vec![0.7], vec![0.7, 0.7], vec![0.7, 0.7, 0.7]]);
        assert_eq!(backward_transfer(&r, BwtMode::Paper).unwrap(), 0.0);
        assert_eq!(backward_transfer(&r, BwtMode::FinalRow).unwrap(), 0.0);
        assert_eq!(forward_transfer(&r, &[None, Some(0.7), Some(0.7)]).unwrap(), 0.0);
    }
}
