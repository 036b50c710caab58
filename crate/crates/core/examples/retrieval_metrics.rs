//! Retrieval scoring and lifelong transfer metrics on hand-made inputs.

use krkc::evaluation::{
    average_incremental_accuracy, average_precision, backward_transfer, forward_transfer, retrieve_and_score,
    AccuracyMatrix, BwtMode, Features,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("AP of [hit, miss, hit] = {:.4}", average_precision(&[true, false, true]));

    let gallery = Features {
        dim: 2,
        data: vec![1.0, 0.0, 0.9, 0.1, 0.0, 1.0, 0.1, 0.9],
    };
    let queries = Features {
        dim: 2,
        data: vec![0.8, 0.3, 0.4, 0.6],
    };
    let r = retrieve_and_score(&queries, &gallery, &[0, 1], &[0, 0, 1, 1])?;
    println!("rankings {:?}", r.rankings);
    println!("mAP {:.4}, Rank-1 {:.4}, CMC {:?}", r.map, r.rank1, r.cmc);

    // Lower-triangular Rank-1 matrix: row = after training step, column = task.
    let m = AccuracyMatrix::from_rows(vec![vec![0.80], vec![0.60, 0.75], vec![0.50, 0.62, 0.78]]);
    let refs = [None, Some(0.70), Some(0.74)];
    println!("average incremental accuracy {:.4}", average_incremental_accuracy(&m)?);
    println!("BWT (paper) {:+.4}", backward_transfer(&m, BwtMode::Paper)?);
    println!("BWT (final row) {:+.4}", backward_transfer(&m, BwtMode::FinalRow)?);
    println!("FWT {:+.4}", forward_transfer(&m, &refs)?);
    Ok(())
}
