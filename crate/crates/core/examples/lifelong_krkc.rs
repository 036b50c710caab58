//! Train the full method task by task, printing what happens at each step.

use krkc::baselines::Strategy;
use krkc::data::{generate_stream, StreamConfig};
use krkc::evaluation::evaluate_task;
use krkc::trainer::{train_first_task, train_task, ModelRole, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let stream = generate_stream(&StreamConfig::default())?;
    let cfg = TrainConfig::default();
    let strategy = Strategy::krkc();

    let mut state = train_first_task(&stream[0], &cfg)?;
    for task in &stream[1..] {
        state = train_task(task, state, &cfg, &strategy, stream.len(), &mut ())?;
        let last = |role: ModelRole| state.log.iter().rev().find(|l| l.task == task.task && l.model == role).cloned();
        if let (Some(w), Some(m)) = (last(ModelRole::Working), last(ModelRole::Memory)) {
            println!(
                "task {}: working loss {:.3} (distill {:.3}), memory loss {:.3} (distill {:.3}), {} exemplar ids",
                task.task,
                w.loss_total,
                w.loss_anti_or_cali,
                m.loss_total,
                m.loss_anti_or_cali,
                state.memory.num_identities()
            );
        }
        let scores: Vec<String> = stream[..task.task]
            .iter()
            .map(|t| evaluate_task(&state.eval_model, t).map(|r| format!("{:.3}", r.rank1)))
            .collect::<Result<_, _>>()?;
        println!("  Rank-1 on seen tasks: [{}]", scores.join(", "));
    }
    println!("trained in {:.1}s", state.elapsed.as_secs_f64());
    Ok(())
}
