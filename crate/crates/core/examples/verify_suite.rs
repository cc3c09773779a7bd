//! The seeded invariant suite, clean and with the injected ordering fault.

use cgflow::verify::{run_verify, VerifySettings};

fn main() -> cgflow::Result<()> {
    let settings = VerifySettings { cases: 10, ..VerifySettings::default() };
    let report = run_verify(&settings, 2024)?;
    for check in &report.checks {
        println!("{:<20} {:>4} evaluations, worst slack {:+.3e}", check.name, check.evaluations, check.worst_slack);
    }
    let faulty = run_verify(&VerifySettings { inject_fault: true, ..settings }, 2024)?;
    println!("with fault: first failure {:?}", faulty.first_failure);
    Ok(())
}
