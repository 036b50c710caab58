#![allow(dead_code)]

use krkc::data::{generate_stream, StreamConfig, TaskDataset};
use krkc::models::{Architecture, Model};
use krkc::trainer::TrainConfig;

pub fn small_stream_config(n_tasks: usize, seed: u64) -> StreamConfig {
    StreamConfig {
        n_tasks,
        ids_per_task: 8,
        samples_per_id: 6,
        test_ids_per_task: 6,
        test_samples_per_id: 4,
        queries_per_id: 1,
        input_dim: 8,
        signal_dim: 4,
        seed,
        ..StreamConfig::default()
    }
}

pub fn small_stream(n_tasks: usize, seed: u64) -> Vec<TaskDataset> {
    generate_stream(&small_stream_config(n_tasks, seed)).unwrap()
}

pub fn small_train_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        p: 4,
        k: 2,
        exemplar_max_ids: 4,
        seed,
        arch: Architecture {
            input_dim: 8,
            hidden: vec![16],
            embedding_dim: 8,
        },
        ..TrainConfig::default()
    }
}

/// Raw parameter values of a model, for bitwise comparisons.
pub fn snapshot(model: &Model) -> Vec<Vec<u64>> {
    model
        .parameters()
        .iter()
        .map(|p| p.to_vec().iter().map(|v| v.to_bits()).collect())
        .collect()
}
