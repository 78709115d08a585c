//! Estimate the diagonal Fisher of a pretrained network and check its stability.

use sp_transfer::data::{generate_synthetic_pair, SyntheticOptions};
use sp_transfer::fisher::split_half_correlation;
use sp_transfer::transfer::pretrain;
use sp_transfer::{desknet, estimate_fisher_diag, Shape3, TrainConfig};

fn main() -> sp_transfer::Result<()> {
    let task = generate_synthetic_pair(3, Shape3::new(1, 12, 12), 4, 3, 0.3, SyntheticOptions::default())?.normalized()?;
    let cfg = TrainConfig { base_lr: 0.05, total_iters: 300, decay_at: 200, batch_size: 32, ..TrainConfig::default() };
    let pre = pretrain(&task.source, Some(&task.source_test), desknet(4), 1e-4, &cfg)?;

    let m = task.source.len();
    let f = estimate_fisher_diag(&pre.net, &task.source, m, 0)?;
    let mut sorted = f.values.clone();
    sorted.sort_by(f64::total_cmp);
    println!("{} shared entries from {m} examples", f.values.len());
    println!("min {:.2e}  median {:.2e}  max {:.2e}", sorted[0], sorted[sorted.len() / 2], sorted[sorted.len() - 1]);
    println!("split-half correlation {:.4}", split_half_correlation(&pre.net, &task.source, m / 2, 1)?);
    Ok(())
}
