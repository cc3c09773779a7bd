//! J(□,p,q) from the coarse matrices against the energy of its maximizer.

use cgflow::{j_by_maximizer, j_functional, CoefficientField, EnsembleSpec, SolverSettings};

fn main() -> cgflow::Result<()> {
    let settings = SolverSettings::default();
    let field = CoefficientField::generate(&EnsembleSpec::two_phase(0.4, 9.0, 0.5, 11), 2, 2)?;
    let cube = field.ambient();
    for (p, q) in [([1.0, 0.0], [0.0, 0.0]), ([0.0, 0.0], [1.0, 0.0]), ([0.3, -0.7], [0.5, 0.2])] {
        let by_matrix = j_functional(&field, &cube, &p, &q, &settings)?;
        let by_energy = j_by_maximizer(&field, &cube, &p, &q, &settings)?;
        println!("p = {p:?}, q = {q:?}: J = {by_matrix:.12} vs {by_energy:.12}");
    }
    Ok(())
}
