//! Coarse-grained pairs of a layered line and of a random checkerboard.

use cgflow::{coarse_pair, CoefficientField, EnsembleSpec, SolverSettings, TriadicCube};

fn main() -> cgflow::Result<()> {
    let settings = SolverSettings::default();

    // in one dimension both matrices are the harmonic mean of the cells
    let line = CoefficientField::from_scalars(1, 1, &[1.0, 2.0, 4.0])?;
    let pair = coarse_pair(&line, &line.ambient(), &settings)?;
    println!("line [1, 2, 4]: a = {:.6}, a_* = {:.6} (12/7 = {:.6})", pair.a.get(0, 0), pair.a_star.get(0, 0), 12.0 / 7.0);

    let field = CoefficientField::generate(&EnsembleSpec::two_phase_contrast(100.0, 7), 2, 3)?;
    for level in 1..=3 {
        let cube = TriadicCube::origin(2, level);
        let pair = coarse_pair(&field, &cube, &settings)?;
        println!(
            "level {level}: tr a/2 = {:.5}, tr a_*/2 = {:.5}, gap eigenvalue min {:.3e}",
            pair.a.trace() / 2.0,
            pair.a_star.trace() / 2.0,
            pair.gap.min_eigenvalue()
        );
    }
    println!("{}", coarse_pair(&field, &field.ambient(), &settings)?.to_json()?);
    Ok(())
}
