//! Evaluate every penalty kind on a small parameter vector.

use sp_transfer::{GroupStructure, ParamVector, PenaltyConfig, PenaltyKind};

fn main() -> sp_transfer::Result<()> {
    // Six shared entries in two groups of three, then a two-entry fresh head.
    let w = ParamVector {
        values: vec![0.5, -0.2, 0.1, 1.0, 0.0, -0.4, 0.3, -0.3],
        layout: Vec::new(),
        shared: vec![true, true, true, true, true, true, false, false],
    };
    let w0 = vec![0.4, -0.2, 0.0, 0.7, 0.1, -0.4];
    let fisher = vec![2.0, 0.5, 1.0, 0.1, 3.0, 1.0];
    let groups = GroupStructure::new(vec![vec![0, 1, 2], vec![3, 4, 5]], vec![(0, 0), (0, 1)])?;

    println!("{:<12} {:>10} {:>10} {:>10}", "kind", "value", "smoothed", "|grad|");
    for kind in PenaltyKind::ALL {
        let p = PenaltyConfig::builder(kind, 0.1, 0.01)
            .reference(w0.clone())
            .fisher(fisher.clone())
            .groups(groups.clone())
            .build(&w)?;
        let g = p.gradient(&w)?;
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("{:<12} {:>10.6} {:>10.6} {:>10.6}", kind.name(), p.value(&w)?, p.surrogate_value(&w)?, norm);
    }
    Ok(())
}
