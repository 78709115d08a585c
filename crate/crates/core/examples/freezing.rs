//! Freeze the first k parameterized layers and compare L2 with L2SP.

use sp_transfer::data::{generate_synthetic_pair, SyntheticOptions};
use sp_transfer::transfer::{freezing_ablation, pretrain, PenaltySpec};
use sp_transfer::{desknet, PenaltyKind, Shape3, TrainConfig};

fn main() -> sp_transfer::Result<()> {
    let opts = SyntheticOptions { noise: 1.2, per_class_train: 8, ..SyntheticOptions::default() };
    let pre_task = generate_synthetic_pair(11, Shape3::new(1, 12, 12), 4, 3, 0.3, opts)?.normalized()?;
    let pre_cfg = TrainConfig { base_lr: 0.05, total_iters: 300, decay_at: 200, batch_size: 32, ..TrainConfig::default() };
    let pre = pretrain(&pre_task.source, None, desknet(4), 1e-4, &pre_cfg)?;

    let replicates = vec![(0, pre_task.clone())];
    let specs = [PenaltySpec::new(PenaltyKind::L2, 1e-3, 0.01), PenaltySpec::new(PenaltyKind::L2Sp, 0.01, 0.01)];
    let cfg = TrainConfig { base_lr: 0.01, total_iters: 150, decay_at: 100, batch_size: 16, ..TrainConfig::default() };
    for row in freezing_ablation(&replicates, &pre.net, None, &specs, &[0, 1, 2], &cfg)? {
        println!("{:<5} k={} test accuracy {:.4}", row.penalty, row.k, row.test_acc);
    }
    Ok(())
}
