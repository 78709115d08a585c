//! Cross-validated alpha/beta grid for L2SP, then refit the winner.

use sp_transfer::data::{generate_synthetic_pair, SyntheticOptions};
use sp_transfer::transfer::{pretrain, refit_best, sweep};
use sp_transfer::{desknet, PenaltyKind, Shape3, TrainConfig};

fn main() -> sp_transfer::Result<()> {
    let task = generate_synthetic_pair(5, Shape3::new(1, 12, 12), 4, 3, 0.3, SyntheticOptions { noise: 2.0, per_class_train: 8, ..SyntheticOptions::default() })?.normalized()?;
    let pre_cfg = TrainConfig { base_lr: 0.05, total_iters: 300, decay_at: 200, batch_size: 32, ..TrainConfig::default() };
    let pre = pretrain(&task.source, None, desknet(4), 1e-4, &pre_cfg)?;

    let cfg = TrainConfig { base_lr: 0.01, total_iters: 100, decay_at: 70, batch_size: 16, ..TrainConfig::default() };
    let result = sweep(&task, &pre.net, None, PenaltyKind::L2Sp, &[0.01, 0.1, 1.0], &[0.001, 0.01], 3, &cfg)?;
    for cell in &result.cells {
        println!("alpha {:<6} beta {:<6} mean {:.4} std {:.4}", cell.alpha, cell.beta, cell.mean, cell.std);
    }
    println!("best {:?} ({})", result.best, result.selection_rule);
    let refit = refit_best(&task, &pre.net, None, &result, &cfg)?;
    println!("refit test accuracy {:.4}", refit.test_accuracy);
    Ok(())
}
