//! Model-space consolidation weights, the averaging step and a checkpoint.

use krkc::models::{consolidation_weights, Architecture, ModelPair};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for t in 1..=5 {
        let (working, memory) = consolidation_weights(t);
        println!("t = {t}: working weight {working:.4}, memory weight {memory:.4}");
    }

    let arch = Architecture {
        input_dim: 4,
        hidden: vec![6],
        embedding_dim: 3,
    };
    let mut pair = ModelPair::new(&arch, 7);
    pair.expand_classifier(1, 2, 8)?;
    // Pretend the working model drifted during training.
    for p in pair.working.parameters() {
        p.data_mut().iter_mut().for_each(|v| *v += 1.0);
    }
    let before = pair.memory.parameters()[0].to_vec()[0];
    let drifted = pair.working.parameters()[0].to_vec()[0];
    pair.consolidate_model_space(3)?;
    let after = pair.working.parameters()[0].to_vec()[0];
    println!("first weight: memory {before:.4}, working {drifted:.4}, consolidated {after:.4}");
    println!("memory equals working after consolidation: {}", pair.working.bit_equal(&pair.memory));

    let ckpt = pair.to_checkpoint();
    println!("checkpoint header:\n{}", ckpt.lines().take(4).collect::<Vec<_>>().join("\n"));
    Ok(())
}
