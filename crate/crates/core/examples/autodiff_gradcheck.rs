//! Build a tiny graph, backpropagate, compare against finite differences and
//! take a few Adam steps.

use krkc::tensor::{finite_difference_check, Adam, AdamConfig, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let w = Tensor::param(vec![0.5, -1.0, 2.0, 0.25], &[2, 2])?;
    let x = Tensor::new(vec![1.0, 2.0, -1.0, 0.5], &[2, 2])?;

    let loss = || x.matmul(&w)?.relu()?.log_softmax(1.0)?.mean();
    let l = loss()?;
    l.backward()?;
    println!("loss = {:.6}", l.item());
    println!("dL/dw = {:?}", w.grad().unwrap());

    let err = finite_difference_check(loss, &[w.clone()], 1e-5)?;
    println!("max relative error vs finite differences: {err:.2e}");

    let mut adam = Adam::new(vec![w.clone()], AdamConfig::default());
    for step in 1..=5 {
        let l = x.matmul(&w)?.sum()?.scale(0.5)?;
        l.backward()?;
        adam.step(0.1)?;
        println!("step {step}: w = {:?}", w.to_vec());
    }
    Ok(())
}
