//! PK batches, exemplar selection and the exemplar buffer across two tasks.

use krkc::data::{derive_seed, generate_stream, pk_sample, select_exemplars, BatchSource, ExemplarMemory, StreamConfig};
use krkc::models::{Architecture, Model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let stream = generate_stream(&StreamConfig {
        n_tasks: 2,
        ..StreamConfig::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0, &[42]));

    let batch = pk_sample(&stream[0].train, BatchSource::NewTask, 4, 3, &mut rng)?;
    println!("PK batch (P=4, K=3) identities: {:?}", batch.identities);

    let model = Model::new(&Architecture::default(), 1);
    let mut memory = ExemplarMemory::new(2, 8);
    for task in &stream {
        memory.add(select_exemplars(&model, task, 2, 8, &mut rng)?);
        println!(
            "after task {}: {} exemplars over {} identities from tasks {:?}",
            task.task,
            memory.len(),
            memory.num_identities(),
            memory.source_tasks()
        );
    }

    let set = memory.to_sample_set(stream[0].train.dim);
    let ex_batch = pk_sample(&set, BatchSource::Exemplar, 4, 3, &mut rng)?;
    println!("exemplar batch identities (cycled, 2 stored per id): {:?}", ex_batch.identities);
    Ok(())
}
