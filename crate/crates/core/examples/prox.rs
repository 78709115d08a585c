//! Proximal maps: soft thresholding toward the reference and radial group shrinkage.

use sp_transfer::{GroupStructure, ParamVector, PenaltyConfig, PenaltyKind};

fn main() -> sp_transfer::Result<()> {
    let w = ParamVector {
        values: vec![1.0, 0.05, -0.5, 0.02, 0.01, 0.9],
        layout: Vec::new(),
        shared: vec![true; 6],
    };
    let w0 = vec![0.0; 6];
    let groups = GroupStructure::new(vec![vec![0, 1, 2], vec![3, 4], vec![5]], vec![(0, 0), (0, 1), (0, 2)])?;
    for kind in [PenaltyKind::L1Sp, PenaltyKind::GlSp] {
        let p = PenaltyConfig::builder(kind, 0.1, 0.0).reference(w0.clone()).groups(groups.clone()).build(&w)?;
        for eta in [0.1, 1.0] {
            let out = p.prox_step(&w, eta)?;
            let at_ref = out.values.iter().zip(&w0).filter(|(a, b)| a == b).count();
            println!("{} eta={eta}: {:?} ({at_ref} entries exactly at w0)", kind.name(), rounded(&out.values));
        }
    }
    Ok(())
}

fn rounded(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}
