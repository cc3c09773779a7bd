//! Multiscale ladder of a lognormal field: Λ, λ and the defect E.

use cgflow::{CoefficientField, EnsembleKind, EnsembleSpec, Exponent, ExponentSet, MultiscaleLadder, SolveBudget, SolverSettings, SpdMatrix};

fn main() -> cgflow::Result<()> {
    let spec = EnsembleSpec::new(EnsembleKind::LognormalIid { mu: 0.0, sigma: 1.0 }, 3);
    let field = CoefficientField::generate(&spec, 2, 3)?;
    let ladder = MultiscaleLadder::build(&field, &field.ambient(), &SolverSettings::default(), SolveBudget::default())?;
    for level in &ladder.levels {
        println!("k = {}: max |a| = {:.4}, max |a_*^-1| = {:.4}", level.level, level.max_a, level.max_astar_inv);
    }
    for q in [Exponent::Finite(1.0), Exponent::Finite(2.0), Exponent::Infinity] {
        let c = ladder.ellipticity_constants(&ExponentSet::new(0.25, 0.25, q)?)?;
        println!("q = {q}: Λ = {:.5}, λ = {:.5}, ratio {:.3}", c.upper, c.lower, c.upper / c.lower);
    }
    let abar = SpdMatrix::scalar(2, ladder.top().a.trace() / 2.0)?;
    println!("E_(1/4,2) = {:.5}", ladder.multiscale_defect(&abar, 0.25, Exponent::Finite(2.0))?);
    Ok(())
}
