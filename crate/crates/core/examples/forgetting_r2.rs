//! Source accuracy after fine-tuning and per-layer activation R² against the pretrained net.

use sp_transfer::data::{generate_synthetic_pair, SyntheticOptions};
use sp_transfer::transfer::{finetune, forgetting, pretrain, r2_analysis, PenaltySpec};
use sp_transfer::{desknet, PenaltyKind, Shape3, TrainConfig};

fn main() -> sp_transfer::Result<()> {
    let task = generate_synthetic_pair(2, Shape3::new(1, 12, 12), 4, 3, 0.5, SyntheticOptions::default())?.normalized()?;
    let pre_cfg = TrainConfig { base_lr: 0.05, total_iters: 300, decay_at: 200, batch_size: 32, ..TrainConfig::default() };
    let pre = pretrain(&task.source, Some(&task.source_test), desknet(4), 1e-4, &pre_cfg)?;

    let cfg = TrainConfig { base_lr: 0.05, total_iters: 200, decay_at: 150, batch_size: 16, ..TrainConfig::default() };
    let mut tuned = Vec::new();
    for spec in [PenaltySpec::new(PenaltyKind::L2, 0.01, 0.01), PenaltySpec::new(PenaltyKind::L2Sp, 0.1, 0.01)] {
        let out = finetune(&task, &pre.net, None, &spec, &cfg)?;
        println!("{}: target accuracy {:.4}", spec.kind, out.test_accuracy);
        tuned.push((spec.kind.name().to_string(), out.net));
    }

    let refs: Vec<_> = tuned.iter().map(|(name, net)| (name.clone(), 0, net)).collect();
    let report = forgetting(&refs, &pre.net, &task.source_test)?;
    for row in &report.rows {
        println!("{}: source accuracy {:.4} -> {:.4}", row.penalty, row.source_acc_before, row.source_acc_after);
    }
    for (name, net) in &tuned {
        for layer in r2_analysis(&pre.net, net, &task.target_test)?.layers {
            let median = layer.median().map_or("undefined".to_string(), |m| format!("{m:.3}"));
            println!("{name}: layer {} median R2 {median}", layer.layer);
        }
    }
    Ok(())
}
