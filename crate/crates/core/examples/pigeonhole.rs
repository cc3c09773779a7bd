//! Scale selection on a synthetic sequence and on a simulated flow.

use cgflow::flow::{contraction_diagnostics, WeakNormExponents};
use cgflow::{pigeonhole_scalars, pigeonhole_select, run_flow, EnsembleSpec, FlowSettings};

fn main() -> cgflow::Result<()> {
    // decreasing fast for three scales, then flat
    let abar = [8.0, 4.0, 2.0, 1.0, 0.98, 0.97];
    let astar_inv = [8.0, 4.0, 2.0, 1.5, 1.45, 1.44];
    let result = pigeonhole_scalars(&abar, &astar_inv, 0.5, 0.5, 1)?;
    println!("synthetic: {:?} after {} witnesses", result.outcome, result.witnesses.len());

    let settings = FlowSettings::with_samples(12);
    let record = run_flow(&EnsembleSpec::two_phase_contrast(16.0, 2), 2, 3, &settings)?;
    let result = pigeonhole_select(&record, 0.5, 0.5, 1)?;
    println!("flow: {:?}, Θ_N/Θ_0 = {:.4}", result.outcome, result.contraction);
    if let Ok(report) = contraction_diagnostics(&record, &result, &WeakNormExponents::default(), 2, &settings) {
        println!("τ = {:.5} ± {:.5}, (Θ_n - 1)/Θ_0 = {:.4} vs δ^(1/4) = {:.4}", report.tau.estimate, report.tau.se, report.realized_ratio, report.delta_quarter);
    }
    Ok(())
}
