//! Triadic seminorms of cell data: a constant, an indicator and a random field.

use cgflow::multiscale::{besov_positive, besov_ring};
use cgflow::Exponent;

fn main() -> cgflow::Result<()> {
    let two = Exponent::Finite(2.0);

    // a unit constant on one cell: the ring sum is the geometric series
    let ring = besov_ring(&[1.0], 1, 1, 0, 0.5, Exponent::Finite(1.0), Exponent::Finite(1.0))?;
    println!("ring of 1 on a cell: {ring:.6} (1/(1 - 3^(-1/2)) = {:.6})", 1.0 / (1.0 - 3f64.powf(-0.5)));

    let indicator = [0.0, 1.0, 0.0];
    println!("positive seminorm of a cell indicator: {:.6}", besov_positive(&indicator, 1, 1, 1, 0.5, two, two)?);

    let data: Vec<f64> = (0..81).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
    for s in [0.25, 0.5, 0.75] {
        println!(
            "s = {s}: positive {:.5}, ring {:.5}",
            besov_positive(&data, 1, 2, 2, s, two, two)?,
            besov_ring(&data, 1, 2, 2, s, two, two)?
        );
    }
    Ok(())
}
