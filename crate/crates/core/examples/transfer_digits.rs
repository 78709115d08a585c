//! Digits 0-4 -> 5-9 transfer at 14x14: pretrain once, then fine-tune under L2, L2SP and
//! L2SP_FISHER and report target accuracy and source forgetting.
//!
//! Usage: cargo run --release --example transfer_digits [per_class_train] [seed]

use sp_transfer::data::{default_data_dir, load_idx_dir, make_split_transfer_seeded};
use sp_transfer::transfer::{finetune, pretrain, source_accuracy_after, PenaltySpec};
use sp_transfer::{desknet, estimate_fisher_diag, PenaltyKind, TrainConfig};

fn main() -> sp_transfer::Result<()> {
    let mut args = std::env::args().skip(1);
    let per_class: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(30);
    let seed: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);

    let digits = load_idx_dir(default_data_dir())?.downsampled(2)?;
    let task = make_split_transfer_seeded(&digits, &[0, 1, 2, 3, 4], &[5, 6, 7, 8, 9], per_class, 0.2, 0, seed)?
        .normalized()?;
    println!(
        "source {} / held-out {}; target train {} val {} test {}",
        task.source.len(),
        task.source_test.len(),
        task.target_train.len(),
        task.target_val.len(),
        task.target_test.len()
    );

    let pre_cfg = TrainConfig { base_lr: 0.05, total_iters: 1500, decay_at: 1000, ..TrainConfig::default() };
    let pre = pretrain(&task.source, Some(&task.source_test), desknet(5), 1e-4, &pre_cfg)?;
    let before = pre.source_test_accuracy.unwrap_or(f64::NAN);
    println!("pretrained source accuracy {before:.4}");
    let fisher = estimate_fisher_diag(&pre.net, &task.source, 2000, 0)?;

    let cfg = TrainConfig { base_lr: 0.01, total_iters: 600, decay_at: 400, seed, ..TrainConfig::default() };
    for spec in [
        PenaltySpec::new(PenaltyKind::L2, 1e-3, 0.01),
        PenaltySpec::new(PenaltyKind::L2Sp, 1e-2, 0.01),
        PenaltySpec::new(PenaltyKind::L2SpFisher, 10.0, 0.01),
    ] {
        let out = finetune(&task, &pre.net, Some(&fisher), &spec, &cfg)?;
        let after = source_accuracy_after(&out.net, &pre.net, &task.source_test)?;
        println!("{:<12} target {:.4}  source {:.4} (drop {:.4})", spec.kind.name(), out.test_accuracy, after, before - after);
    }
    Ok(())
}
