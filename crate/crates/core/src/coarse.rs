//! Coarse-grained matrices `a(□)`, `a_*(□)` of a block and the quantities
//! built from them.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{subcubes, CoefficientField, TriadicCube};
use crate::solver::{BlockSolver, SolverSettings};
use crate::spd::{dot, norm, Mat, SpdMatrix};

/// Relative PSD slack tolerated before a pair is declared inconsistent.
pub const ORDERING_TOLERANCE: f64 = 1e-9;

/// Interior residual below which a nodal function counts as `a`-harmonic.
pub const HARMONIC_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug, Serialize)]
pub struct CoarseGrainedPair {
    pub cube: TriadicCube,
    pub a: SpdMatrix,
    pub a_star: SpdMatrix,
    #[serde(skip)]
    pub a_star_inv: SpdMatrix,
    /// `a − a_*`, positive semidefinite up to roundoff.
    pub gap: Mat,
    /// Relative residuals of the `d` Dirichlet then `d` Neumann solves.
    pub solver_residuals: Vec<f64>,
}

impl CoarseGrainedPair {
    pub fn dim(&self) -> usize {
        self.a.dim()
    }

    /// `J(□,p,q) = ½p·a p + ½q·a_*⁻¹ q − p·q`.
    pub fn j(&self, p: &[f64], q: &[f64]) -> f64 {
        0.5 * self.a.quad(p) + 0.5 * self.a_star_inv.quad(q) - dot(p, q)
    }

    /// Smallest eigenvalue of the gap over `|a|`; nonnegative up to roundoff.
    pub fn ordering_slack(&self) -> f64 {
        self.gap.min_eigenvalue() / self.a.norm()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn basis(dim: usize, i: usize) -> Vec<f64> {
    let mut e = vec![0.0; dim];
    e[i] = 1.0;
    e
}

/// Extracts the pair from `d` Dirichlet and `d` Neumann solves on an
/// assembled block.
pub fn coarse_pair_from(solver: &BlockSolver) -> Result<CoarseGrainedPair> {
    let d = solver.cube().dim();
    let volume = solver.cube().volume();
    let k = solver.stiffness();
    let mut residuals = Vec::with_capacity(2 * d);

    let mut dirichlet = Vec::with_capacity(d);
    for i in 0..d {
        let s = solver.dirichlet(&basis(d, i))?;
        residuals.push(s.residual);
        dirichlet.push(s.nodal);
    }
    let mut neumann = Vec::with_capacity(d);
    let mut loads = Vec::with_capacity(d);
    for i in 0..d {
        let e = basis(d, i);
        let s = solver.neumann(&e)?;
        residuals.push(s.residual);
        neumann.push(s.nodal);
        loads.push(solver.flux_load(&e));
    }

    let mut a = Mat::zeros(d);
    let mut a_star_inv = Mat::zeros(d);
    for i in 0..d {
        for j in i..d {
            let aij = k.form(&dirichlet[i], &dirichlet[j]) / volume;
            // symmetric form whose error is quadratic in the solve error
            let bij = (dot(&loads[i], &neumann[j]) + dot(&loads[j], &neumann[i])
                - k.form(&neumann[i], &neumann[j]))
                / volume;
            a.set(i, j, aij);
            a.set(j, i, aij);
            a_star_inv.set(i, j, bij);
            a_star_inv.set(j, i, bij);
        }
    }
    let a = SpdMatrix::new(a)
        .map_err(|e| Error::Consistency(format!("Dirichlet coarse matrix on {:?}: {e}", solver.cube())))?;
    let a_star_inv = SpdMatrix::new(a_star_inv)
        .map_err(|e| Error::Consistency(format!("Neumann coarse matrix on {:?}: {e}", solver.cube())))?;
    let a_star = a_star_inv.inverse();
    let gap = (*a.as_mat() - *a_star.as_mat()).symmetrize();
    let pair = CoarseGrainedPair { cube: *solver.cube(), a, a_star, a_star_inv, gap, solver_residuals: residuals };
    if pair.ordering_slack() < -ORDERING_TOLERANCE {
        return Err(Error::Consistency(format!(
            "a_* exceeds a on {:?} (relative gap eigenvalue {:e})",
            pair.cube,
            pair.ordering_slack()
        )));
    }
    Ok(pair)
}

pub fn coarse_pair(field: &CoefficientField, cube: &TriadicCube, settings: &SolverSettings) -> Result<CoarseGrainedPair> {
    coarse_pair_from(&BlockSolver::new(field, cube, *settings)?)
}

/// `J(□,p,q)` by the matrix formula.
pub fn j_functional(
    field: &CoefficientField,
    cube: &TriadicCube,
    p: &[f64],
    q: &[f64],
    settings: &SolverSettings,
) -> Result<f64> {
    Ok(coarse_pair(field, cube, settings)?.j(p, q))
}

/// `J(□,p,q)` as the energy of its maximizer `v(·,□,p,q)`.
pub fn j_by_maximizer(
    field: &CoefficientField,
    cube: &TriadicCube,
    p: &[f64],
    q: &[f64],
    settings: &SolverSettings,
) -> Result<f64> {
    Ok(BlockSolver::new(field, cube, *settings)?.combined(p, q)?.energy)
}

/// Both sides of an inequality `lhs ≤ rhs`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Bound {
    pub lhs: f64,
    pub rhs: f64,
}

impl Bound {
    /// `(rhs − lhs) / scale`: nonnegative when the inequality holds.
    pub fn slack(&self) -> f64 {
        let scale = self.lhs.abs().max(self.rhs.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.rhs - self.lhs) / scale
        }
    }

    pub fn holds(&self, rel_tol: f64) -> bool {
        self.slack() >= -rel_tol
    }
}

/// Both sides of an identity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Identity {
    pub lhs: f64,
    pub rhs: f64,
}

impl Identity {
    pub fn relative_error(&self, floor: f64) -> f64 {
        (self.lhs - self.rhs).abs() / self.lhs.abs().max(self.rhs.abs()).max(floor)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EnergyMaps {
    /// `½(⨍∇w)·a_*(⨍∇w)`
    pub grad_side: f64,
    /// `⨍½∇w·a∇w`
    pub energy: f64,
    /// `½(⨍a∇w)·a⁻¹(⨍a∇w)`, only for `a`-harmonic `w`.
    pub flux_side: Option<f64>,
}

/// An assembled block with its coarse-grained pair, for evaluating the
/// block identities and inequalities against many test functions.
pub struct BlockAnalysis<'a> {
    solver: BlockSolver<'a>,
    pair: CoarseGrainedPair,
}

impl<'a> BlockAnalysis<'a> {
    pub fn new(field: &'a CoefficientField, cube: &TriadicCube, settings: &SolverSettings) -> Result<Self> {
        let solver = BlockSolver::new(field, cube, *settings)?;
        let pair = coarse_pair_from(&solver)?;
        Ok(BlockAnalysis { solver, pair })
    }

    pub fn solver(&self) -> &BlockSolver<'a> {
        &self.solver
    }

    pub fn pair(&self) -> &CoarseGrainedPair {
        &self.pair
    }

    fn require_harmonic(&self, w: &[f64]) -> Result<()> {
        let r = self.solver.interior_residual(w);
        if r > HARMONIC_TOLERANCE {
            return Err(Error::Precondition(format!("test function is not a-harmonic (interior residual {r:e})")));
        }
        Ok(())
    }

    fn check_len(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.solver.stiffness().node_count() {
            return Err(Error::param("nodal vector length differs from node count"));
        }
        Ok(())
    }

    /// `J` by the matrix formula and by the energy of `v`.
    pub fn j_identity(&self, p: &[f64], q: &[f64]) -> Result<Identity> {
        Ok(Identity { lhs: self.pair.j(p, q), rhs: self.solver.combined(p, q)?.energy })
    }

    /// `|⨍a∇w − a_*⨍∇w| ≤ |a − a_*|^{1/2} (⨍∇w·a∇w)^{1/2}` for harmonic `w`.
    pub fn response_defect(&self, w: &[f64]) -> Result<Bound> {
        self.check_len(w)?;
        self.require_harmonic(w)?;
        let grad = self.solver.mean_gradient(w);
        let flux = self.solver.mean_flux(w);
        let predicted = self.pair.a_star.mul_vec(&grad);
        let diff: Vec<f64> = flux.iter().zip(&predicted).map(|(f, p)| f - p).collect();
        let gap = self.pair.gap.max_eigenvalue().max(0.0);
        let energy2 = 2.0 * self.solver.energy(w);
        Ok(Bound { lhs: norm(&diff), rhs: (gap * energy2).sqrt() })
    }

    /// Block-energy lower bounds by the mean gradient and, for harmonic `w`,
    /// by the mean flux.
    pub fn energy_maps(&self, w: &[f64], with_flux: bool) -> Result<EnergyMaps> {
        self.check_len(w)?;
        if with_flux {
            self.require_harmonic(w)?;
        }
        let grad = self.solver.mean_gradient(w);
        let flux_side = with_flux.then(|| {
            let flux = self.solver.mean_flux(w);
            0.5 * self.pair.a.inverse().quad(&flux)
        });
        Ok(EnergyMaps { grad_side: 0.5 * self.pair.a_star.quad(&grad), energy: self.solver.energy(w), flux_side })
    }

    /// `|⨍(p·a∇w − q·∇w)| ≤ (2J)^{1/2} (⨍∇w·a∇w)^{1/2}` for harmonic `w`.
    pub fn flux_map(&self, w: &[f64], p: &[f64], q: &[f64]) -> Result<Bound> {
        self.check_len(w)?;
        self.require_harmonic(w)?;
        let lhs = dot(p, &self.solver.mean_flux(w)) - dot(q, &self.solver.mean_gradient(w));
        let j = self.pair.j(p, q).max(0.0);
        Ok(Bound { lhs: lhs.abs(), rhs: (2.0 * j * 2.0 * self.solver.energy(w)).sqrt() })
    }

    /// `q·⨍∇w − p·⨍a∇w = ⨍∇w·a∇v(·,□,p,q)` for harmonic `w`.
    pub fn first_variation(&self, w: &[f64], p: &[f64], q: &[f64]) -> Result<Identity> {
        self.check_len(w)?;
        self.require_harmonic(w)?;
        let v = self.solver.combined(p, q)?;
        let lhs = dot(q, &self.solver.mean_gradient(w)) - dot(p, &self.solver.mean_flux(w));
        Ok(Identity { lhs, rhs: self.solver.energy_pairing(w, &v.nodal) })
    }

    /// `J − ⨍(q·∇w − p·a∇w − ½∇w·a∇w) = ⨍½(∇v − ∇w)·a(∇v − ∇w)` for harmonic `w`.
    pub fn second_variation(&self, w: &[f64], p: &[f64], q: &[f64]) -> Result<Identity> {
        self.check_len(w)?;
        self.require_harmonic(w)?;
        let v = self.solver.combined(p, q)?;
        let functional =
            dot(q, &self.solver.mean_gradient(w)) - dot(p, &self.solver.mean_flux(w)) - self.solver.energy(w);
        let diff: Vec<f64> = v.nodal.iter().zip(w).map(|(a, b)| a - b).collect();
        Ok(Identity { lhs: self.pair.j(p, q) - functional, rhs: self.solver.energy(&diff) })
    }

    /// `⨍a∇v(·,□,p,0) = a ⨍∇v(·,□,p,0)` and
    /// `⨍a∇v(·,□,0,q) = a_* ⨍∇v(·,□,0,q)`; returns the two residual norms
    /// relative to the flux size.
    pub fn exact_response(&self, p: &[f64], q: &[f64]) -> Result<(f64, f64)> {
        let rel = |flux: &[f64], predicted: Vec<f64>| {
            let diff: Vec<f64> = flux.iter().zip(&predicted).map(|(a, b)| a - b).collect();
            norm(&diff) / norm(flux).max(f64::MIN_POSITIVE)
        };
        let dir = self.solver.combined(p, &vec![0.0; p.len()])?;
        let neu = self.solver.combined(&vec![0.0; q.len()], q)?;
        Ok((
            rel(&dir.mean_flux, self.pair.a.mul_vec(&dir.mean_gradient)),
            rel(&neu.mean_flux, self.pair.a_star.mul_vec(&neu.mean_gradient)),
        ))
    }

    /// `a ≤ ⨍a` and `a_*⁻¹ ≤ ⨍a⁻¹`, as smallest eigenvalues of the
    /// differences relative to the larger matrix.
    pub fn integral_bound_slacks(&self) -> (f64, f64) {
        let cells = self.solver.stiffness().cells();
        let n = cells.len() as f64;
        let d = self.pair.dim();
        let mut mean = Mat::zeros(d);
        let mut mean_inv = Mat::zeros(d);
        for c in cells {
            mean = mean + *c;
            mean_inv = mean_inv + c.try_inverse().expect("cell matrices are definite");
        }
        let mean = mean.scale(1.0 / n);
        let mean_inv = mean_inv.scale(1.0 / n);
        let upper = (mean - *self.pair.a.as_mat()).symmetrize().min_eigenvalue() / mean.spectral_norm();
        let lower =
            (mean_inv - *self.pair.a_star_inv.as_mat()).symmetrize().min_eigenvalue() / mean_inv.spectral_norm();
        (upper, lower)
    }
}

/// `(lhs, rhs)` of `response_defect` for a harmonic nodal function on `cube`.
pub fn response_defect(
    field: &CoefficientField,
    cube: &TriadicCube,
    w: &[f64],
    settings: &SolverSettings,
) -> Result<Bound> {
    BlockAnalysis::new(field, cube, settings)?.response_defect(w)
}

/// Gradient side, energy, and (for harmonic `w`) flux side of the energy maps.
pub fn energy_map_check(
    field: &CoefficientField,
    cube: &TriadicCube,
    w: &[f64],
    with_flux: bool,
    settings: &SolverSettings,
) -> Result<EnergyMaps> {
    BlockAnalysis::new(field, cube, settings)?.energy_maps(w, with_flux)
}

/// `avg_z J(z+□_n,p,q) − J(□_m,p,q)` over the level-`n` subcubes of `cube`.
pub fn subadditivity_defect(
    field: &CoefficientField,
    cube: &TriadicCube,
    level: u32,
    p: &[f64],
    q: &[f64],
    settings: &SolverSettings,
) -> Result<f64> {
    if level >= cube.level() {
        return Err(Error::param(format!("subcube level {level} must be below {}", cube.level())));
    }
    let parts = subcubes(cube, level)?;
    let mut total = 0.0;
    for sub in &parts {
        total += coarse_pair(field, sub, settings)?.j(p, q);
    }
    Ok(total / parts.len() as f64 - coarse_pair(field, cube, settings)?.j(p, q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::EnsembleSpec;

    fn line_124() -> CoefficientField {
        CoefficientField::from_scalars(1, 1, &[1.0, 2.0, 4.0]).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs())
    }

    #[test]
    fn harmonic_mean_pair_1d() {
        let f = line_124();
        let pair = coarse_pair(&f, &f.ambient(), &SolverSettings::default()).unwrap();
        assert!(rel(pair.a.get(0, 0), 12.0 / 7.0) < 1e-13);
        assert!(rel(pair.a_star.get(0, 0), 12.0 / 7.0) < 1e-13);
        assert!(rel(pair.j(&[1.0], &[1.0]), 25.0 / 168.0) < 1e-12);
    }

    #[test]
    fn constant_and_single_cell_pairs() {
        let f = CoefficientField::generate(&EnsembleSpec::constant(2.5), 2, 2).unwrap();
        let pair = coarse_pair(&f, &f.ambient(), &SolverSettings::default()).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expected = if i == j { 2.5 } else { 0.0 };
                assert!((pair.a.get(i, j) - expected).abs() < 1e-10);
                assert!((pair.a_star.get(i, j) - expected).abs() < 1e-10);
            }
        }
        let cell = Mat::from_row_major(2, &[3.0, 1.0, 1.0, 2.0]).unwrap();
        let g = CoefficientField::from_cells(2, 0, &[SpdMatrix::new(cell).unwrap()]).unwrap();
        let pair = coarse_pair(&g, &g.ambient(), &SolverSettings::default()).unwrap();
        for (x, y) in pair.a.row_major().iter().zip(cell.row_major()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in pair.a_star.row_major().iter().zip(cell.row_major()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn j_examples() {
        let c = 3.0;
        let f = CoefficientField::generate(&EnsembleSpec::constant(c), 2, 1).unwrap();
        let s = SolverSettings::default();
        assert!(j_functional(&f, &f.ambient(), &[1.0, 2.0], &[c, 2.0 * c], &s).unwrap().abs() < 1e-12);
        assert!(rel(j_functional(&f, &f.ambient(), &[1.0, 0.0], &[0.0, 0.0], &s).unwrap(), c / 2.0) < 1e-12);
    }

    #[test]
    fn subadditivity_example_1d() {
        let f = line_124();
        let s = SolverSettings::default();
        let defect = subadditivity_defect(&f, &f.ambient(), 0, &[1.0], &[0.0], &s).unwrap();
        // avg ½(1,2,4) − ½·12/7 = 7/6 − 6/7
        assert!(rel(defect, 13.0 / 42.0) < 1e-12, "{defect}");
        assert_eq!(subadditivity_defect(&f, &f.ambient(), 0, &[0.0], &[0.0], &s).unwrap(), 0.0);
    }

    #[test]
    fn identities_on_random_field() {
        let f = CoefficientField::generate(&EnsembleSpec::two_phase(0.5, 10.0, 0.1, 9), 2, 2).unwrap();
        let analysis = BlockAnalysis::new(&f, &f.ambient(), &SolverSettings::default()).unwrap();
        let (p, q) = ([0.4, -1.0], [2.0, 0.3]);
        let id = analysis.j_identity(&p, &q).unwrap();
        assert!(id.relative_error(0.0) < 1e-9);
        let (dir, neu) = analysis.exact_response(&p, &q).unwrap();
        assert!(dir < 1e-9 && neu < 1e-9);
        for w in analysis.solver().harmonic_pool(5, 2).unwrap() {
            assert!(analysis.first_variation(&w.nodal, &p, &q).unwrap().relative_error(1e-12) < 1e-8);
            assert!(analysis.second_variation(&w.nodal, &p, &q).unwrap().relative_error(1e-12) < 1e-8);
            assert!(analysis.response_defect(&w.nodal).unwrap().holds(1e-9));
            assert!(analysis.flux_map(&w.nodal, &p, &q).unwrap().holds(1e-9));
            let maps = analysis.energy_maps(&w.nodal, true).unwrap();
            assert!(maps.grad_side <= maps.energy * (1.0 + 1e-9));
            assert!(maps.flux_side.unwrap() <= maps.energy * (1.0 + 1e-9));
        }
        let (upper, lower) = analysis.integral_bound_slacks();
        assert!(upper > -1e-9 && lower > -1e-9);
        assert!(analysis.pair().ordering_slack() > -1e-9);
    }

    #[test]
    fn neumann_solution_has_zero_response_defect() {
        let f = CoefficientField::generate(&EnsembleSpec::two_phase(0.5, 10.0, 0.1, 4), 2, 2).unwrap();
        let analysis = BlockAnalysis::new(&f, &f.ambient(), &SolverSettings::default()).unwrap();
        let w = analysis.solver().neumann(&[1.0, 0.5]).unwrap();
        let b = analysis.response_defect(&w.nodal).unwrap();
        assert!(b.lhs < 1e-9 * b.rhs.max(1.0));
        let maps = analysis.energy_maps(&w.nodal, false).unwrap();
        assert!(rel(maps.grad_side, maps.energy) < 1e-9);
    }

    #[test]
    fn non_harmonic_flux_side_rejected() {
        let f = CoefficientField::generate(&EnsembleSpec::two_phase(0.5, 10.0, 0.1, 4), 2, 1).unwrap();
        let analysis = BlockAnalysis::new(&f, &f.ambient(), &SolverSettings::default()).unwrap();
        let mut w = vec![0.0; analysis.solver().stiffness().node_count()];
        w[5] = 1.0;
        assert!(matches!(analysis.energy_maps(&w, true), Err(Error::Precondition(_))));
        assert!(analysis.energy_maps(&w, false).is_ok());
    }

    #[test]
    fn pair_json_shape() {
        let f = line_124();
        let pair = coarse_pair(&f, &f.ambient(), &SolverSettings::default()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&pair.to_json().unwrap()).unwrap();
        assert_eq!(v["cube"]["level"], 1);
        assert!(v["a"].is_array() && v["a_star"].is_array());
        assert_eq!(v["solver_residuals"].as_array().unwrap().len(), 2);
    }
}
