//! Annealed flow of the two-phase checkerboard with contrast 100.

use cgflow::{run_flow, EnsembleSpec, FlowSettings};

fn main() -> cgflow::Result<()> {
    let spec = EnsembleSpec::two_phase_contrast(100.0, 1);
    let record = run_flow(&spec, 2, 3, &FlowSettings::with_samples(16))?;
    print!("{}", record.to_csv());
    let p = [1.0, 0.0];
    let tau = record.tau(3, 0, &p, &[0.0, 0.0])?;
    println!("tau(3, 0) at p = e1: {:.5} ± {:.5}", tau.estimate, tau.se);
    Ok(())
}
