//! Seeded invariant suite over random fields and cubes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coarse::{subadditivity_defect, BlockAnalysis, Bound, Identity};
use crate::error::{Error, Result};
use crate::grid::{CoefficientField, EnsembleKind, EnsembleSpec};
use crate::multiscale::{cg_poincare_check, Exponent, MultiscaleLadder, SolveBudget};
use crate::solver::SolverSettings;
use crate::spd::{dot, Mat};

/// Relative slack a check may lose to roundoff.
pub const CHECK_TOLERANCE: f64 = 1e-7;

/// Check names in evaluation order.
pub const CHECK_NAMES: [&str; 11] = [
    "ordering",
    "j_identity",
    "integral_bounds",
    "subadditivity",
    "first_variation",
    "second_variation",
    "response_map",
    "flux_map",
    "energy_map_gradient",
    "energy_map_flux",
    "poincare",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySettings {
    pub cases: usize,
    pub dimensions: Vec<usize>,
    pub max_level: u32,
    /// Harmonic test functions per case, besides the maximizer of `J`.
    pub harmonic_functions: usize,
    /// Pushes `a(□)` below `a_*(□)` by `10⁻³|a|` before the ordering check.
    pub inject_fault: bool,
    pub solver: SolverSettings,
}

impl Default for VerifySettings {
    fn default() -> Self {
        VerifySettings {
            cases: 50,
            dimensions: vec![1, 2],
            max_level: 3,
            harmonic_functions: 2,
            inject_fault: false,
            solver: SolverSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckSummary {
    pub name: String,
    pub evaluations: usize,
    /// Smallest relative slack seen; identities report minus their relative error.
    pub worst_slack: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub cases: usize,
    pub tolerance: f64,
    pub checks: Vec<CheckSummary>,
    /// First check, in evaluation order, that failed on any case.
    pub first_failure: Option<String>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.first_failure.is_none()
    }
}

struct Tally {
    checks: Vec<CheckSummary>,
}

impl Tally {
    fn new() -> Self {
        Tally {
            checks: CHECK_NAMES
                .iter()
                .map(|n| CheckSummary { name: n.to_string(), evaluations: 0, worst_slack: f64::INFINITY, passed: true })
                .collect(),
        }
    }

    fn record(&mut self, name: &str, slack: f64) {
        let c = self.checks.iter_mut().find(|c| c.name == name).expect("known check");
        c.evaluations += 1;
        c.worst_slack = c.worst_slack.min(slack);
        // NaN slack counts as a failure
        if slack.is_nan() || slack < -CHECK_TOLERANCE {
            c.passed = false;
        }
    }

    fn bound(&mut self, name: &str, b: Bound) {
        self.record(name, b.slack());
    }

    /// Slack measured against `floor` when both sides are roundoff-small.
    fn bound_floored(&mut self, name: &str, b: Bound, floor: f64) {
        self.record(name, (b.rhs - b.lhs) / b.lhs.abs().max(b.rhs.abs()).max(floor));
    }

    fn identity(&mut self, name: &str, i: Identity, floor: f64) {
        self.record(name, -i.relative_error(floor));
    }
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

fn random_spec(rng: &mut ChaCha8Rng, d: usize) -> EnsembleSpec {
    let seed = rng.random();
    let kind = match rng.random_range(0..3) {
        0 => {
            let theta: f64 = rng.random_range(2.0..100.0);
            let r = theta.sqrt();
            EnsembleKind::TwoPhaseIid { p: rng.random_range(0.2..0.8), sigma_hi: r, sigma_lo: 1.0 / r }
        }
        1 => EnsembleKind::LognormalIid { mu: rng.random_range(-0.5..0.5), sigma: rng.random_range(0.1..1.2) },
        _ if d > 1 => EnsembleKind::Laminate1d { p: 0.5, sigma_hi: rng.random_range(2.0..10.0), sigma_lo: 0.5 },
        _ => EnsembleKind::TwoPhaseIid { p: 0.5, sigma_hi: 4.0, sigma_lo: 0.25 },
    };
    EnsembleSpec::new(kind, seed)
}

/// Smallest relative gap eigenvalue after the injected fault: `a` is moved
/// to `a − (λ_max(a − a_*) + 10⁻³|a|) I`.
fn faulted_ordering_slack(a: &Mat, gap: &Mat) -> f64 {
    let norm = a.spectral_norm();
    let shift = gap.max_eigenvalue().max(0.0) + 1e-3 * norm;
    (*gap - Mat::identity(gap.dim()).scale(shift)).symmetrize().min_eigenvalue() / norm
}

fn run_case(rng: &mut ChaCha8Rng, settings: &VerifySettings, tally: &mut Tally) -> Result<()> {
    let d = settings.dimensions[rng.random_range(0..settings.dimensions.len())];
    let m = rng.random_range(1..=settings.max_level);
    let field = CoefficientField::generate(&random_spec(rng, d), d, m)?;
    let cube = field.ambient();
    let analysis = BlockAnalysis::new(&field, &cube, &settings.solver)?;
    let pair = analysis.pair();
    let ordering = if settings.inject_fault {
        faulted_ordering_slack(pair.a.as_mat(), &pair.gap)
    } else {
        pair.ordering_slack()
    };
    tally.record("ordering", ordering);

    let (p, q) = (random_vec(rng, d), random_vec(rng, d));
    let scale = pair.a.norm() * dot(&p, &p) + pair.a_star_inv.norm() * dot(&q, &q);
    tally.identity("j_identity", analysis.j_identity(&p, &q)?, 1e-300);
    let (upper, lower) = analysis.integral_bound_slacks();
    tally.record("integral_bounds", upper.min(lower));

    let level = rng.random_range(0..m);
    let defect = subadditivity_defect(&field, &cube, level, &p, &q, &settings.solver)?;
    let top = pair.j(&p, &q);
    tally.bound("subadditivity", Bound { lhs: top, rhs: top + defect });

    let solver = analysis.solver();
    let mut functions = vec![solver.combined(&p, &q)?];
    functions.extend(solver.harmonic_pool(settings.harmonic_functions, rng.random())?);
    let ladder = MultiscaleLadder::build(&field, &cube, &settings.solver, SolveBudget::default())?;
    for w in &functions {
        let w = &w.nodal;
        let energy_floor = scale.max(2.0 * solver.energy(w)) * 1e-3;
        tally.identity("first_variation", analysis.first_variation(w, &p, &q)?, energy_floor);
        tally.identity("second_variation", analysis.second_variation(w, &p, &q)?, energy_floor);
        let flux_scale = (pair.a.norm() * 2.0 * solver.energy(w)).sqrt();
        tally.bound_floored("response_map", analysis.response_defect(w)?, flux_scale);
        tally.bound_floored("flux_map", analysis.flux_map(w, &p, &q)?, flux_scale * (dot(&p, &p) + dot(&q, &q)).sqrt());
        let maps = analysis.energy_maps(w, true)?;
        tally.bound("energy_map_gradient", Bound { lhs: maps.grad_side, rhs: maps.energy });
        tally.bound("energy_map_flux", Bound { lhs: maps.flux_side.unwrap_or(0.0), rhs: maps.energy });
        let poincare = cg_poincare_check(&ladder, solver, w, 0.25, Exponent::Finite(2.0))?;
        tally.bound("poincare", poincare.gradient);
        if let Some(flux) = poincare.flux {
            tally.bound("poincare", flux);
        }
    }
    Ok(())
}

/// Runs `cases` seeded random instances through every asserted identity
/// and inequality of the coarse-graining and multiscale layers.
pub fn run_verify(settings: &VerifySettings, seed: u64) -> Result<VerifyReport> {
    if settings.dimensions.is_empty() || settings.dimensions.iter().any(|d| !(1..=3).contains(d)) {
        return Err(Error::param("verify dimensions must be a nonempty subset of {1, 2, 3}"));
    }
    if settings.max_level == 0 || settings.max_level > 4 {
        return Err(Error::param(format!("verify max_level {} must lie in 1..=4", settings.max_level)));
    }
    settings.solver.validate()?;
    let mut tally = Tally::new();
    for case in 0..settings.cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(case as u64));
        run_case(&mut rng, settings, &mut tally)?;
    }
    let checks: Vec<CheckSummary> = if settings.cases == 0 {
        Vec::new()
    } else {
        tally.checks.into_iter().filter(|c| c.evaluations > 0).collect()
    };
    let first_failure = checks.iter().find(|c| !c.passed).map(|c| c.name.clone());
    Ok(VerifyReport { seed, cases: settings.cases, tolerance: CHECK_TOLERANCE, checks, first_failure })
}
