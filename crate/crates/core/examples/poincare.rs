//! Coarse-grained Poincaré inequality on random harmonic functions.

use cgflow::multiscale::cg_poincare_check;
use cgflow::{BlockSolver, CoefficientField, EnsembleSpec, Exponent, MultiscaleLadder, SolveBudget, SolverSettings};

fn main() -> cgflow::Result<()> {
    let settings = SolverSettings::default();
    let field = CoefficientField::generate(&EnsembleSpec::two_phase_contrast(16.0, 5), 2, 2)?;
    let cube = field.ambient();
    let ladder = MultiscaleLadder::build(&field, &cube, &settings, SolveBudget::default())?;
    let solver = BlockSolver::new(&field, &cube, settings)?;
    for (s, q) in [(0.25, Exponent::Finite(1.0)), (0.25, Exponent::Finite(2.0)), (0.5, Exponent::Infinity)] {
        let mut worst = f64::INFINITY;
        for u in solver.harmonic_pool(20, 1)? {
            let report = cg_poincare_check(&ladder, &solver, &u.nodal, s, q)?;
            worst = worst.min(report.gradient.slack());
            if let Some(flux) = report.flux {
                worst = worst.min(flux.slack());
            }
        }
        println!("s = {s}, q = {q}: worst relative slack {worst:.4}");
    }
    Ok(())
}
