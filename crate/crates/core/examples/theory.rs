//! Closed-form minimizer of a quadratic objective with an L2SP penalty, checked by descent.

use sp_transfer::theory::{
    analytic_sp_minimizer, empirical_descent_check, l2_rescaling_check, mixing_coefficients, QuadraticModel,
    QuadraticPenalty,
};

fn main() -> sp_transfer::Result<()> {
    let m = QuadraticModel::new(vec![1.0, 0.0, 0.0, 3.0], vec![2.0, 2.0], vec![0.0, 4.0])?;
    for alpha in [0.1, 1.0, 10.0] {
        let w = analytic_sp_minimizer(&m, alpha)?;
        let coeffs = mixing_coefficients(&m, alpha)?;
        let gap = empirical_descent_check(&m, alpha, QuadraticPenalty::L2Sp, 0)?;
        println!("alpha {alpha:>5}: w = {w:.4?}  weights {coeffs:.3?}  |descent - closed form| {gap:.1e}");
    }

    let random = QuadraticModel::random(6, 42)?;
    println!("plain L2 shrinks each eigendirection by lambda/(lambda+alpha):");
    for row in l2_rescaling_check(&random, 0.5)? {
        println!("  lambda {:.4}  scale {:.4}  solved {:+.5}  predicted {:+.5}", row.lambda, row.scale, row.projected, row.predicted);
    }
    Ok(())
}
