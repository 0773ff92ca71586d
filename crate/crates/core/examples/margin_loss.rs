//! Margin-softmax loss on a tiny buffer, with and without the similarity filter,
//! checked against central differences.

use pfc_sim::gradcheck::{check, Tolerance};
use pfc_sim::loss::{apply_margin, loss_and_grad, MarginConfig};
use pfc_sim::numerics::Matrix;

fn main() -> pfc_sim::Result<()> {
    // 3-dim features for 2 samples, 4 buffered centers
    let x = Matrix::from_columns(3, &[vec![1.0, 0.2, -0.1], vec![0.1, 0.9, 0.3]])?;
    let w = Matrix::from_columns(
        3,
        &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.7, 0.7, 0.1], vec![-0.2, 0.1, 1.0]],
    )?;
    let positives = vec![Some(0), Some(1)];

    for margin in [MarginConfig::plain(), MarginConfig::cosface(), MarginConfig::arcface()] {
        println!("{:?}: positive logit at cos 0.5 = {:.4}", margin.kind(), apply_margin(0.5, true, &margin));
        for filter in [None, Some(0.4)] {
            let lg = loss_and_grad(&x, &w, positives.clone(), filter, &margin)?;
            let report = check(x.as_slice(), lg.d_features.as_slice(), Tolerance::default(), |p| {
                let xp = Matrix::new(3, 2, p.to_vec()).unwrap();
                loss_and_grad(&xp, &w, positives.clone(), filter, &margin).unwrap().loss
            });
            println!(
                "  filter {filter:?}: loss {:.6}, feature gradient agrees with finite differences: {}",
                lg.loss,
                report.passed()
            );
        }
    }
    Ok(())
}
