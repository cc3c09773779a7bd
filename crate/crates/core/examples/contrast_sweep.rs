//! Homogenization scale against cell contrast in two dimensions.

use cgflow::flow::HomogenizationScale;
use cgflow::{homogenization_scale, EnsembleSpec, FlowSettings};

fn main() -> cgflow::Result<()> {
    let settings = FlowSettings::with_samples(8);
    println!("theta,n_hat,confident,log_theta_sq");
    for theta in [4.0, 16.0, 64.0, 256.0] {
        let (scale, _) = homogenization_scale(&EnsembleSpec::two_phase_contrast(theta, 9), 2, 0.5, 3, &settings)?;
        let (n, confident) = match scale {
            HomogenizationScale::Reached { n, confident } => (n.to_string(), confident.to_string()),
            HomogenizationScale::NotReached => (String::new(), String::new()),
        };
        println!("{theta},{n},{confident},{}", f64::ln(theta).powi(2));
    }
    Ok(())
}
