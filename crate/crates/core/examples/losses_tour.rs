//! The individual loss terms and the two composite objectives on a toy batch.

use krkc::losses::{batch_hard_triplets, cross_entropy, js_distillation, refreshing_loss, rehearsal_loss, triplet_loss};
use krkc::tensor::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Four samples, two identities (PK batch with P = 2, K = 2).
    let ids = [0, 0, 1, 1];
    let emb = Tensor::from_rows(&[
        vec![0.0, 0.0],
        vec![0.3, 0.1],
        vec![1.0, 1.0],
        vec![0.2, 0.1],
    ])?;
    let triplets = batch_hard_triplets(&emb, &ids)?;
    println!("hardest positives {:?}, negatives {:?}", triplets.positives, triplets.negatives);
    println!("triplet loss (margin 0.3) = {:.4}", triplet_loss(&triplets, 0.3)?.item());

    let student = Tensor::from_rows(&[vec![2.0, 0.5, -1.0], vec![0.1, 1.5, 0.3], vec![-0.5, 0.2, 2.0], vec![1.0, 1.0, 0.0]])?;
    let teacher = Tensor::from_rows(&[vec![1.5, 0.5, -0.5], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.5, 1.0, 0.5]])?;
    let classes = [0, 0, 1, 1];
    println!("cross-entropy = {:.4}", cross_entropy(&student, &classes)?.item());
    for t in [1.0, 2.0, 4.0] {
        println!("JS distillation at T={t} = {:.5}", js_distillation(&student, &teacher, t)?.item());
    }

    let exemplars = Tensor::from_rows(&[vec![2.0, -1.0], vec![2.2, -0.8], vec![-2.0, 0.5], vec![-1.7, 0.4]])?;
    let ex_ids = [7, 7, 9, 9];
    let rehearsal = rehearsal_loss(&student, &teacher, &emb, &exemplars, &classes, &ids, &ex_ids, 2.0, 0.3)?;
    let refreshing = refreshing_loss(&teacher, &student, &emb, &exemplars, &classes, &ids, &ex_ids, 2.0, 0.3)?;
    println!("rehearsal  {:?}", rehearsal.breakdown);
    println!("refreshing {:?}", refreshing.breakdown);
    Ok(())
}
