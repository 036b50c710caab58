//! Training objectives: cross-entropy, batch-hard triplet, temperature-scaled
//! Jensen-Shannon distillation, and the composite rehearsal/refreshing losses.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{what}: expected {expected} labels, got {got}")]
    LabelCount {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("identity {0} has a single instance in the batch; batch-hard mining needs a positive")]
    SingletonLabel(usize),
    #[error("batch holds a single identity ({0}); batch-hard mining needs a negative")]
    SingleClass(usize),
    #[error("triplet set is empty")]
    EmptyTriplets,
    #[error("margin must be non-negative, got {0}")]
    NegativeMargin(f64),
    #[error("student and teacher logits differ in shape: {0:?} vs {1:?}")]
    DistillShape(Vec<usize>, Vec<usize>),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Floor inside the logarithms of the divergence.
pub const LOG_EPS: f64 = 1e-12;
/// Squared distances below this are treated as zero when taking the root.
const DIST_FLOOR: f64 = 1e-12;

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, c) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(LossError::LabelCount {
            what: "cross_entropy",
            expected: n,
            got: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= c) {
        return Err(LossError::LabelOutOfRange { label, classes: c });
    }
    let picks: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * c + y).collect();
    Ok(logits.log_softmax(1.0)?.gather(&picks)?.mean()?.scale(-1.0)?)
}

/// `T^2 / N * sum_i JS(softmax(s_i/T) || softmax(t_i/T))`, natural log.
///
/// The teacher is detached: no gradient reaches `teacher_logits`.
pub fn js_distillation(student_logits: &Tensor, teacher_logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if student_logits.shape() != teacher_logits.shape() {
        return Err(LossError::DistillShape(
            student_logits.shape().to_vec(),
            teacher_logits.shape().to_vec(),
        ));
    }
    let p = student_logits.softmax(temperature)?;
    let q = teacher_logits.stop_gradient().softmax(temperature)?;
    let m = p.add(&q)?.scale(0.5)?;
    let log_m = m.add_scalar(LOG_EPS)?.log()?;
    let kl_pm = p.mul(&p.add_scalar(LOG_EPS)?.log()?.sub(&log_m)?)?.sum_rows()?;
    let kl_qm = q.mul(&q.add_scalar(LOG_EPS)?.log()?.sub(&log_m)?)?.sum_rows()?;
    let js = kl_pm.add(&kl_qm)?.scale(0.5)?;
    Ok(js.mean()?.scale(temperature * temperature)?)
}

/// Batch-hard triplets: per anchor, farthest same-label sample and nearest
/// different-label sample under Euclidean distance. Ties resolve to the lowest
/// index.
#[derive(Debug, Clone)]
pub struct TripletSet {
    /// `[N, N]` Euclidean distance matrix, part of the autodiff graph.
    distances: Tensor,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub ap_dist: Vec<f64>,
    pub an_dist: Vec<f64>,
}

impl TripletSet {
    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }
}

pub fn batch_hard_triplets(embeddings: &Tensor, labels: &[usize]) -> Result<TripletSet> {
    let n = embeddings.rows();
    if labels.len() != n {
        return Err(LossError::LabelCount {
            what: "batch_hard_triplets",
            expected: n,
            got: labels.len(),
        });
    }
    let mut counts = std::collections::BTreeMap::new();
    for &y in labels {
        *counts.entry(y).or_insert(0usize) += 1;
    }
    if let Some((&y, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(LossError::SingletonLabel(y));
    }
    if counts.len() < 2 {
        return Err(LossError::SingleClass(labels.first().copied().unwrap_or(0)));
    }

    let distances = embeddings.pairwise_sq_dist()?.sqrt_clamped(DIST_FLOOR)?;
    let d = distances.to_vec();
    let mut set = TripletSet {
        distances: distances.clone(),
        positives: Vec::with_capacity(n),
        negatives: Vec::with_capacity(n),
        ap_dist: Vec::with_capacity(n),
        an_dist: Vec::with_capacity(n),
    };
    for a in 0..n {
        let row = &d[a * n..(a + 1) * n];
        let (mut pos, mut neg) = (None::<usize>, None::<usize>);
        for j in 0..n {
            if j == a {
                continue;
            }
            if labels[j] == labels[a] {
                if pos.is_none_or(|p| row[j] > row[p]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|q| row[j] < row[q]) {
                neg = Some(j);
            }
        }
        let (pos, neg) = (pos.expect("label count >= 2"), neg.expect(">= 2 labels"));
        set.positives.push(pos);
        set.negatives.push(neg);
        set.ap_dist.push(row[pos]);
        set.an_dist.push(row[neg]);
    }
    Ok(set)
}

/// Mean over anchors of `max(d(a,p) - d(a,n) + margin, 0)`.
pub fn triplet_loss(triplets: &TripletSet, margin: f64) -> Result<Tensor> {
    if !(margin >= 0.0) {
        return Err(LossError::NegativeMargin(margin));
    }
    if triplets.is_empty() {
        return Err(LossError::EmptyTriplets);
    }
    let n = triplets.distances.rows();
    let ap: Vec<usize> = triplets.positives.iter().enumerate().map(|(a, &p)| a * n + p).collect();
    let an: Vec<usize> = triplets.negatives.iter().enumerate().map(|(a, &q)| a * n + q).collect();
    let d_ap = triplets.distances.gather(&ap)?;
    let d_an = triplets.distances.gather(&an)?;
    Ok(d_ap.sub(&d_an)?.add_scalar(margin)?.relu()?.mean()?)
}

/// Mines and scores one batch.
pub fn batch_hard_triplet_loss(embeddings: &Tensor, labels: &[usize], margin: f64) -> Result<Tensor> {
    triplet_loss(&batch_hard_triplets(embeddings, labels)?, margin)
}

/// Scalar values of one composite loss evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Anti-forgetting term for the working model, calibration term for the
    /// memory model. Zero when distillation is off.
    pub distill: f64,
    pub ce: f64,
    pub trip: f64,
    pub total: f64,
}

/// Differentiable total plus its scalar components.
#[derive(Debug, Clone)]
pub struct CompositeLoss {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

/// Inputs shared by the rehearsal and refreshing objectives.
///
/// `student_*` belong to the model being updated; `teacher_logits` come from
/// the other model and are detached.
#[derive(Debug, Clone, Copy)]
pub struct CompositeInputs<'a> {
    pub student_logits: &'a Tensor,
    pub teacher_logits: Option<&'a Tensor>,
    pub student_new_embeddings: &'a Tensor,
    pub student_exemplar_embeddings: Option<&'a Tensor>,
    pub new_classes: &'a [usize],
    pub new_identities: &'a [usize],
    pub exemplar_identities: &'a [usize],
    pub temperature: f64,
    pub margin: f64,
    /// Distill only over the first `k` logits (old classes) when set.
    pub distill_columns: Option<usize>,
}

/// `distill + ce + trip`, where exemplars enter only the triplet term and the
/// triplet term is the sum of the new-batch mean and the exemplar-batch mean.
pub fn composite_loss(inputs: &CompositeInputs<'_>) -> Result<CompositeLoss> {
    let ce = cross_entropy(inputs.student_logits, inputs.new_classes)?;
    let mut trip = batch_hard_triplet_loss(inputs.student_new_embeddings, inputs.new_identities, inputs.margin)?;
    if let Some(emb) = inputs.student_exemplar_embeddings {
        trip = trip.add(&batch_hard_triplet_loss(emb, inputs.exemplar_identities, inputs.margin)?)?;
    }
    let mut total = ce.add(&trip)?;
    let mut distill_value = 0.0;
    if let Some(teacher) = inputs.teacher_logits {
        let (s, t) = match inputs.distill_columns {
            Some(k) if k < inputs.student_logits.cols() => {
                (inputs.student_logits.slice_cols(0, k)?, teacher.slice_cols(0, k)?)
            }
            _ => (inputs.student_logits.clone(), teacher.clone()),
        };
        let distill = js_distillation(&s, &t, inputs.temperature)?;
        distill_value = distill.item();
        total = distill.add(&total)?;
    }
    let breakdown = LossBreakdown {
        distill: distill_value,
        ce: ce.item(),
        trip: trip.item(),
        total: total.item(),
    };
    Ok(CompositeLoss { total, breakdown })
}

/// Working-model objective: anti-forgetting distillation from the detached
/// memory model, cross-entropy on new samples, triplets on new and exemplar
/// batches.
#[allow(clippy::too_many_arguments)]
pub fn rehearsal_loss(
    working_logits: &Tensor,
    memory_logits: &Tensor,
    working_new_embeddings: &Tensor,
    working_exemplar_embeddings: &Tensor,
    new_classes: &[usize],
    new_identities: &[usize],
    exemplar_identities: &[usize],
    temperature: f64,
    margin: f64,
) -> Result<CompositeLoss> {
    composite_loss(&CompositeInputs {
        student_logits: working_logits,
        teacher_logits: Some(memory_logits),
        student_new_embeddings: working_new_embeddings,
        student_exemplar_embeddings: Some(working_exemplar_embeddings),
        new_classes,
        new_identities,
        exemplar_identities,
        temperature,
        margin,
        distill_columns: None,
    })
}

/// Memory-model objective: the mirror of [`rehearsal_loss`] with the roles of
/// the two models exchanged (calibration against the detached working model).
#[allow(clippy::too_many_arguments)]
pub fn refreshing_loss(
    memory_logits: &Tensor,
    working_logits: &Tensor,
    memory_new_embeddings: &Tensor,
    memory_exemplar_embeddings: &Tensor,
    new_classes: &[usize],
    new_identities: &[usize],
    exemplar_identities: &[usize],
    temperature: f64,
    margin: f64,
) -> Result<CompositeLoss> {
    rehearsal_loss(
        memory_logits,
        working_logits,
        memory_new_embeddings,
        memory_exemplar_embeddings,
        new_classes,
        new_identities,
        exemplar_identities,
        temperature,
        margin,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::LN_2;

    fn t(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::new(data, shape).unwrap()
    }

    #[test]
    fn cross_entropy_peaked_is_near_zero() {
        let logits = t(vec![30.0, 0.0, 0.0, 30.0], &[2, 2]);
        assert!(cross_entropy(&logits, &[0, 1]).unwrap().item() < 1e-9);
    }

    #[test]
    fn cross_entropy_uniform_is_log_c() {
        let logits = Tensor::zeros(&[3, 4]);
        assert_abs_diff_eq!(cross_entropy(&logits, &[0, 2, 3]).unwrap().item(), 4f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(4f64.ln(), 1.3863, epsilon = 1e-4);
    }

    #[test]
    fn cross_entropy_batch_is_mean_of_singletons() {
        let a = cross_entropy(&t(vec![0.3, -1.2, 2.0], &[1, 3]), &[1]).unwrap().item();
        let b = cross_entropy(&t(vec![1.5, 0.1, -0.4], &[1, 3]), &[0]).unwrap().item();
        let both = cross_entropy(&t(vec![0.3, -1.2, 2.0, 1.5, 0.1, -0.4], &[2, 3]), &[1, 0])
            .unwrap()
            .item();
        assert_abs_diff_eq!(both, (a + b) / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let err = cross_entropy(&Tensor::zeros(&[1, 3]), &[3]).unwrap_err();
        assert!(matches!(err, LossError::LabelOutOfRange { label: 3, classes: 3 }));
    }

    #[test]
    fn js_identical_is_zero() {
        let x = t(vec![0.2, -1.0, 3.0], &[1, 3]);
        assert_eq!(js_distillation(&x, &x, 2.0).unwrap().item(), 0.0);
    }

    #[test]
    fn js_disjoint_point_masses_is_ln2() {
        let s = t(vec![1000.0, 0.0], &[1, 2]);
        let q = t(vec![0.0, 1000.0], &[1, 2]);
        assert_abs_diff_eq!(js_distillation(&s, &q, 1.0).unwrap().item(), LN_2, epsilon = 1e-9);
    }

    #[test]
    fn js_shape_mismatch() {
        let err = js_distillation(&Tensor::zeros(&[1, 2]), &Tensor::zeros(&[1, 3]), 1.0).unwrap_err();
        assert!(matches!(err, LossError::DistillShape(..)));
    }

    #[test]
    fn js_teacher_receives_no_gradient() {
        let s = Tensor::param(vec![0.5, -0.5, 1.0, 0.0], &[2, 2]).unwrap();
        let q = Tensor::param(vec![-0.5, 0.5, 0.0, 1.0], &[2, 2]).unwrap();
        js_distillation(&s, &q, 2.0).unwrap().backward().unwrap();
        assert!(s.grad().is_some());
        assert!(q.grad().is_none());
    }

    #[test]
    fn triplet_hinge_examples() {
        // Two anchors hand-placed on a line so the mined distances are
        // (0.2, 0.9) and (0.5, 0.4).
        let emb = t(vec![0.0, 0.2, 0.9, 1.1], &[4, 1]);
        let set = batch_hard_triplets(&emb, &[0, 0, 1, 1]).unwrap();
        assert_abs_diff_eq!(set.ap_dist[0], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(set.an_dist[0], 0.9, epsilon = 1e-12);

        let inactive = t(vec![0.0, 0.2, 0.9, 1.2], &[4, 1]);
        let s = batch_hard_triplets(&inactive, &[0, 0, 1, 1]).unwrap();
        assert!(s.ap_dist[0] - s.an_dist[0] + 0.3 < 0.0);

        // Anchor 0 at 0, positive at 0.5, negative at -0.4:
        // max(0.5 - 0.4 + 0.3, 0) = 0.4 for this anchor.
        let emb = t(vec![0.0, 0.5, -0.4, -10.0], &[4, 1]);
        let set = batch_hard_triplets(&emb, &[0, 0, 1, 1]).unwrap();
        let hinge0 = (set.ap_dist[0] - set.an_dist[0] + 0.3).max(0.0);
        assert_abs_diff_eq!(hinge0, 0.4, epsilon = 1e-12);
    }

    #[test]
    fn triplet_loss_direct_value() {
        // d(a,p) = 0.5, d(a,n) = 0.4 for anchors 0 and 1, margin 0.3.
        let emb = t(vec![0.0, 0.5, -0.4, 0.9], &[4, 1]);
        let set = batch_hard_triplets(&emb, &[0, 0, 1, 1]).unwrap();
        assert_eq!(set.positives[..2], [1, 0]);
        assert_eq!(set.negatives[..2], [2, 3]);
        let loss = triplet_loss(&set, 0.3).unwrap().item();
        let expected: f64 = (0..4)
            .map(|a| (set.ap_dist[a] - set.an_dist[a] + 0.3).max(0.0))
            .sum::<f64>()
            / 4.0;
        assert_abs_diff_eq!(loss, expected, epsilon = 1e-15);
        assert_abs_diff_eq!((set.ap_dist[0] - set.an_dist[0] + 0.3).max(0.0), 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!((set.ap_dist[1] - set.an_dist[1] + 0.3).max(0.0), 0.4, epsilon = 1e-12);
    }

    #[test]
    fn identical_embeddings_give_zero_distances() {
        let emb = t(vec![1.0; 8], &[4, 2]);
        let set = batch_hard_triplets(&emb, &[3, 3, 5, 5]).unwrap();
        assert!(set.ap_dist.iter().chain(&set.an_dist).all(|&d| d == 0.0));
    }

    #[test]
    fn singleton_label_is_rejected() {
        let emb = t(vec![0.0, 1.0, 10.0], &[3, 1]);
        let err = batch_hard_triplets(&emb, &[7, 7, 9]).unwrap_err();
        assert!(matches!(err, LossError::SingletonLabel(9)));
        let err = batch_hard_triplets(&t(vec![0.0, 1.0], &[2, 1]), &[4, 4]).unwrap_err();
        assert!(matches!(err, LossError::SingleClass(4)));
    }

    #[test]
    fn triplet_loss_is_translation_invariant() {
        let a = t(vec![0.1, 0.3, 0.7, -0.2, 0.5, 0.5, -0.3, 0.9], &[4, 2]);
        let b = t(a.to_vec().iter().enumerate().map(|(i, v)| v + if i % 2 == 0 { 3.0 } else { -1.5 }).collect(), &[4, 2]);
        let la = batch_hard_triplet_loss(&a, &[0, 0, 1, 1], 0.3).unwrap().item();
        let lb = batch_hard_triplet_loss(&b, &[0, 0, 1, 1], 0.3).unwrap().item();
        assert_abs_diff_eq!(la, lb, epsilon = 1e-12);
    }

    #[test]
    fn composite_without_teacher_difference_is_exact_sum() {
        let logits = t(vec![0.1, 0.4, -0.3, 0.2, 0.0, 0.9, 0.3, -0.1], &[4, 2]);
        let emb = t(vec![0.1, 0.3, 0.7, -0.2, 0.5, 0.5, -0.3, 0.9], &[4, 2]);
        let loss = rehearsal_loss(&logits, &logits, &emb, &emb, &[0, 0, 1, 1], &[0, 0, 1, 1], &[0, 0, 1, 1], 2.0, 0.3)
            .unwrap();
        let b = loss.breakdown;
        assert_eq!(b.distill, 0.0);
        assert_abs_diff_eq!(b.total, b.ce + b.trip, epsilon = 1e-12);
    }
}
