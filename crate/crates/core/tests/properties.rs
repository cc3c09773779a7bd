//! Property tests for the invariants of every layer.

use cgflow::coarse::{subadditivity_defect, BlockAnalysis};
use cgflow::flow::{isotropic_average, pigeonhole_scalars};
use cgflow::grid::{dihedral_conjugate, subcubes};
use cgflow::multiscale::{besov_ring, discounted_series};
use cgflow::{
    coarse_pair, run_flow, AxisMap, CoefficientField, EnsembleKind, EnsembleSpec, Error, Exponent, ExponentSet,
    FlowSettings, Mat, MultiscaleLadder, RunConfig, SolveBudget, SolverSettings, SpdMatrix, TriadicCube,
};
use proptest::prelude::*;

fn settings() -> SolverSettings {
    SolverSettings::default()
}

/// Random SPD cells `L Lᵗ + εI` with entries of `L` in `[-1, 1]`.
fn spd_cells(dim: usize, count: usize) -> impl Strategy<Value = Vec<SpdMatrix>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, dim * dim), count).prop_map(move |ls| {
        ls.iter()
            .map(|l| {
                let l = Mat::from_row_major(dim, l).unwrap();
                let a = l * l.transpose() + Mat::identity(dim).scale(0.1);
                SpdMatrix::new(a.symmetrize()).unwrap()
            })
            .collect()
    })
}

fn field_strategy() -> impl Strategy<Value = CoefficientField> {
    (1usize..=2, 1u32..=2).prop_flat_map(|(d, m)| {
        let count = 3usize.pow(d as u32 * m);
        spd_cells(d, count).prop_map(move |cells| CoefficientField::from_cells(d, m, &cells).unwrap())
    })
}

fn unit_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn partition_covers_each_cell_once(d in 1usize..=3, m in 0u32..=3, n_frac in 0.0f64..1.0) {
        prop_assume!(d < 3 || m <= 2);
        let n = (n_frac * (m + 1) as f64) as u32;
        let cube = TriadicCube::origin(d, m);
        let parts = subcubes(&cube, n).unwrap();
        prop_assert_eq!(parts.len() * 3usize.pow(d as u32 * n), cube.cell_count());
        let mut hits = vec![0u8; cube.cell_count()];
        let side = cube.side();
        for p in &parts {
            let s = p.side();
            for k in 0..s.pow(d as u32) {
                let mut idx = 0;
                let mut rest = k;
                let mut stride = 1;
                for axis in 0..d {
                    let c = p.offset()[axis] + rest % s;
                    rest /= s;
                    idx += c * stride;
                    stride *= side;
                }
                hits[idx] += 1;
            }
        }
        prop_assert!(hits.iter().all(|&h| h == 1));
    }

    #[test]
    fn generation_is_deterministic_and_extends(seed in any::<u64>(), d in 1usize..=2, kind in 0usize..3) {
        let kind = match kind {
            0 => EnsembleKind::TwoPhaseIid { p: 0.5, sigma_hi: 3.0, sigma_lo: 0.5 },
            1 => EnsembleKind::LognormalIid { mu: 0.1, sigma: 0.7 },
            _ => EnsembleKind::Laminate1d { p: 0.3, sigma_hi: 5.0, sigma_lo: 1.0 },
        };
        let spec = EnsembleSpec::new(kind, seed);
        let big = CoefficientField::generate(&spec, d, 3).unwrap();
        prop_assert_eq!(&big, &CoefficientField::generate(&spec, d, 3).unwrap());
        let small = CoefficientField::generate(&spec, d, 1).unwrap();
        let restricted = big.restrict(1).unwrap();
        prop_assert_eq!(restricted.entries(), small.entries());
    }

    #[test]
    fn dirichlet_mean_gradient_is_p(field in field_strategy(), p in unit_vec(2)) {
        let d = field.dim();
        let p = &p[..d];
        let solver = cgflow::BlockSolver::new(&field, &field.ambient(), settings()).unwrap();
        let sol = solver.dirichlet(p).unwrap();
        for (g, pi) in sol.mean_gradient.iter().zip(p) {
            prop_assert!((g - pi).abs() <= 1e-12 * (1.0 + pi.abs()));
        }
    }

    #[test]
    fn variation_identities_and_inequalities(field in field_strategy(), p in unit_vec(2), q in unit_vec(2), seed in any::<u64>()) {
        let d = field.dim();
        let (p, q) = (&p[..d], &q[..d]);
        let cube = field.ambient();
        let analysis = BlockAnalysis::new(&field, &cube, &settings()).unwrap();
        let pair = analysis.pair();
        prop_assert!(pair.ordering_slack() >= -1e-9);
        let (upper, lower) = analysis.integral_bound_slacks();
        prop_assert!(upper >= -1e-9 && lower >= -1e-9);
        let id = analysis.j_identity(p, q).unwrap();
        prop_assert!(id.relative_error(1e-300) <= 1e-7);
        let scale = pair.a.norm() + pair.a_star_inv.norm();
        for w in analysis.solver().harmonic_pool(3, seed).unwrap() {
            let energy = 2.0 * analysis.solver().energy(&w.nodal);
            let floor = 1e-3 * scale.max(energy);
            prop_assert!(analysis.first_variation(&w.nodal, p, q).unwrap().relative_error(floor) <= 1e-8);
            prop_assert!(analysis.second_variation(&w.nodal, p, q).unwrap().relative_error(floor) <= 1e-8);
            let flux = analysis.flux_map(&w.nodal, p, q).unwrap();
            prop_assert!(flux.lhs <= flux.rhs + 1e-9 * (scale * energy).sqrt());
        }
        let defect = subadditivity_defect(&field, &cube, cube.level() - 1, p, q, &settings()).unwrap();
        prop_assert!(defect >= -1e-9 * scale);
    }

    #[test]
    fn coarse_pair_is_local(field in field_strategy(), bump in 0.5f64..5.0) {
        let d = field.dim();
        let sub = TriadicCube::origin(d, field.ambient_level() - 1);
        let before = coarse_pair(&field, &sub, &settings()).unwrap();
        let side = sub.side();
        let mutated = field.map_cells(|x, a| {
            if x.iter().all(|&c| c < side) { a } else { SpdMatrix::scalar(d, bump).unwrap() }
        });
        let after = coarse_pair(&mutated, &sub, &settings()).unwrap();
        prop_assert_eq!(before.a.row_major(), after.a.row_major());
        prop_assert_eq!(before.a_star.row_major(), after.a_star.row_major());
    }

    #[test]
    fn dihedral_equivariance(field in field_strategy(), which in any::<prop::sample::Index>()) {
        let d = field.dim();
        let group = AxisMap::group(d);
        let map = &group[which.index(group.len())];
        let conj = dihedral_conjugate(&field, map).unwrap();
        let cube = TriadicCube::origin(d, field.ambient_level() - 1);
        let image = map.map_cube(&cube, field.side());
        let original = coarse_pair(&field, &cube, &settings()).unwrap();
        let mapped = coarse_pair(&conj, &image, &settings()).unwrap();
        let expected = map.conjugate(original.a.as_mat());
        let expected_star = map.conjugate(original.a_star.as_mat());
        let tol = 1e-9 * original.a.norm();
        prop_assert!((expected - *mapped.a.as_mat()).max_abs() <= tol);
        prop_assert!((expected_star - *mapped.a_star.as_mat()).max_abs() <= tol);
    }

    #[test]
    fn ladder_orderings(field in field_strategy(), s in 0.05f64..0.9, t in 0.05f64..0.9) {
        let ladder = MultiscaleLadder::build(&field, &field.ambient(), &settings(), SolveBudget::default()).unwrap();
        for w in ladder.max_a().windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-9));
        }
        for w in ladder.max_astar_inv().windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-9));
        }
        let one = ladder.ellipticity_constants(&ExponentSet::new(s, t, Exponent::Finite(1.0)).unwrap()).unwrap();
        let sup = ladder.ellipticity_constants(&ExponentSet::new(s, t, Exponent::Infinity).unwrap()).unwrap();
        prop_assert!(sup.upper <= one.upper * (1.0 + 1e-12));
        prop_assert!(1.0 / sup.lower <= (1.0 / one.lower) * (1.0 + 1e-12));

        // uniform ellipticity bounds carry over
        let d = field.dim();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..field.cell_count() {
            let e = field.cell_mat(i).sym_eigenvalues();
            lo = lo.min(e[0]);
            hi = hi.max(e[d - 1]);
        }
        for q in [Exponent::Finite(1.0), Exponent::Finite(2.0), Exponent::Infinity] {
            let c = ladder.ellipticity_constants(&ExponentSet::new(s, t, q).unwrap()).unwrap();
            prop_assert!(c.upper <= hi * (1.0 + 1e-9));
            prop_assert!(c.lower >= lo * (1.0 - 1e-9));
        }
    }

    #[test]
    fn constant_field_defect_vanishes(c in 0.1f64..10.0, d in 1usize..=2, s in 0.05f64..0.45) {
        let field = CoefficientField::generate(&EnsembleSpec::constant(c), d, 2).unwrap();
        let ladder = MultiscaleLadder::build(&field, &field.ambient(), &settings(), SolveBudget::default()).unwrap();
        let abar = SpdMatrix::scalar(d, c).unwrap();
        for q in [Exponent::Finite(1.0), Exponent::Finite(3.0), Exponent::Infinity] {
            prop_assert!(ladder.multiscale_defect(&abar, s, q).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn ring_is_homogeneous(data in prop::collection::vec(-3.0f64..3.0, 9), c in -4.0f64..4.0, s in 0.1f64..1.0) {
        let two = Exponent::Finite(2.0);
        let base = besov_ring(&data, 1, 2, 1, s, two, two).unwrap();
        let scaled: Vec<f64> = data.iter().map(|x| c * x).collect();
        let value = besov_ring(&scaled, 1, 2, 1, s, two, two).unwrap();
        prop_assert!((value - c.abs() * base).abs() <= 1e-12 * (1.0 + base));
    }

    #[test]
    fn series_tail_matches_truncated_sum(levels in prop::collection::vec(0.0f64..5.0, 1..5), s in 0.1f64..1.0, q in 1.0f64..4.0) {
        let tail = levels[0];
        let closed = discounted_series(s, Exponent::Finite(q), &levels, tail);
        let m = levels.len() - 1;
        let r = 3f64.powf(-s * q);
        let mut sum: f64 = levels.iter().enumerate().map(|(k, x)| r.powi((m - k) as i32) * x.powf(q)).sum();
        for j in 1..=400 {
            sum += r.powi((m + j) as i32) * tail.powf(q);
        }
        prop_assert!(rel(closed, sum.powf(1.0 / q)) <= 1e-10);
    }

    #[test]
    fn isotropic_average_keeps_trace(entries in prop::collection::vec(-2.0f64..2.0, 9), d in 1usize..=3) {
        let l = Mat::from_row_major(d, &entries[..d * d]).unwrap();
        let a = (l * l.transpose()).symmetrize();
        let avg = isotropic_average(&a).unwrap();
        prop_assert!((avg.trace() - a.trace()).abs() <= 1e-12 * (1.0 + a.trace()));
    }

    #[test]
    fn pigeonhole_never_flags_exact_monotone_input(
        delta in 0.1f64..=0.5,
        sigma in 0.1f64..=0.5,
        h in 1u32..=3,
        extra in 0u32..4,
        drops in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 80),
    ) {
        let steps = (2.0 / delta * sigma.ln().abs()).ceil() as u32;
        let n = steps * h + extra;
        let mut abar = vec![1.0];
        let mut astar_inv = vec![1.0];
        for i in 0..n as usize {
            // nonincreasing, occasionally by large factors
            abar.push(abar[i] * (1.0 - 0.9 * drops[i % drops.len()].0.powi(3)));
            astar_inv.push(astar_inv[i] * (1.0 - 0.9 * drops[i % drops.len()].1.powi(3)));
        }
        let result = pigeonhole_scalars(&abar, &astar_inv, delta, sigma, h);
        prop_assert!(!matches!(result, Err(Error::NoiseInconsistency { .. })), "{:?}", result);
        prop_assert!(result.is_ok());
    }

    #[test]
    fn config_round_trips(dim in 1usize..=3, level in 0u32..5, seed in any::<u64>(), samples in 2usize..100, s in 0.01f64..1.0, q_inf in any::<bool>()) {
        let q = if q_inf { "\"inf\"".to_string() } else { "2.5".to_string() };
        let text = format!(
            r#"{{"dimension": {dim}, "level": {level}, "seed": {seed}, "samples": {samples},
                "ensemble": {{"type": "lognormal_iid", "mu": 0.0, "sigma": 0.5}},
                "exponents": {{"s": {s}, "t": 0.5, "q": {q}, "nu1": 0.1, "nu2": 0.2}},
                "solver": {{"tolerance": 1e-11}}, "flow": {{"find_scale": 0.5}}}}"#
        );
        let config = RunConfig::from_json(&text).unwrap();
        let again = RunConfig::from_json(&config.to_json().unwrap()).unwrap();
        prop_assert_eq!(config, again);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn annealed_monotonicity_and_tau(seed in any::<u64>(), d in 1usize..=2, theta in 2.0f64..50.0) {
        let spec = EnsembleSpec::two_phase_contrast(theta, seed);
        let record = run_flow(&spec, d, 2, &FlowSettings::with_samples(12)).unwrap();
        for w in record.levels.windows(2) {
            prop_assert!(w[1].abar_scalar <= w[0].abar_scalar + 2.0 * w[1].abar_scalar_se.max(w[0].abar_scalar_se) + 1e-12);
            prop_assert!(w[1].astar_inv_scalar <= w[0].astar_inv_scalar + 2.0 * w[1].astar_inv_scalar_se.max(w[0].astar_inv_scalar_se) + 1e-12);
            let tau = w[1].tau_prev.unwrap();
            prop_assert!(tau >= -2.0 * w[1].tau_prev_se.unwrap() - 1e-12);
        }
    }
}
