//! Train DeskNet from scratch on a synthetic task and log the trajectory.

use sp_transfer::data::{generate_synthetic_pair, SyntheticOptions};
use sp_transfer::{desknet, evaluate, train, CropMode, EarlyStop, Network, PenaltyConfig, PenaltyKind, Shape3, TrainConfig};

fn main() -> sp_transfer::Result<()> {
    let task = generate_synthetic_pair(7, Shape3::new(1, 12, 12), 4, 3, 0.3, SyntheticOptions::default())?.normalized()?;
    let net = Network::new(task.source.shape(), desknet(4), 0)?;
    let penalty = PenaltyConfig::builder(PenaltyKind::L2, 1e-4, 1e-4).build(&net.params)?;
    let cfg = TrainConfig {
        base_lr: 0.05,
        total_iters: 300,
        decay_at: 200,
        batch_size: 32,
        early_stop: Some(EarlyStop { patience: 3, eval_every: 50 }),
        ..TrainConfig::default()
    };
    let (trained, history) = train(&net, &task.source, Some(&task.source_test), &penalty, &cfg)?;
    for s in history.steps.iter().step_by(50) {
        println!("iter {:>4}  loss {:.4}  penalty {:.2e}  lr {:.4}", s.iter, s.loss, s.penalty, s.lr);
    }
    println!("stopped: {:?} at iter {}", history.stop_reason, history.returned_iter);
    println!("held-out accuracy {:.4}", evaluate(&trained, &task.source_test, CropMode::Central)?);
    Ok(())
}
