//! Discrete variational block problems on a lattice cube.
//!
//! The Dirichlet problem minimizes `⨍ ½∇w·a∇w` over nodal functions equal to
//! `ℓ_p` on the boundary; the Neumann problem maximizes
//! `⨍ (q·∇w − ½∇w·a∇w)` over all nodal functions, gauge-fixed to zero mean.

mod linalg;
pub mod stiffness;

use std::cell::OnceCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CoefficientField, TriadicCube};
use crate::spd::dot;

use linalg::{pcg, true_residual, DenseFactor};
pub use stiffness::Stiffness;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    /// Dense Cholesky up to `direct_threshold` unknowns, conjugate gradients above.
    #[default]
    Auto,
    Iterative,
    Direct,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    /// Relative residual target for conjugate gradients.
    pub tolerance: f64,
    /// Iteration cap; `None` means ten times the unknown count.
    pub max_iterations: Option<usize>,
    pub direct_threshold: usize,
    pub method: SolveMethod,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings { tolerance: 1e-10, max_iterations: None, direct_threshold: 1000, method: SolveMethod::Auto }
    }
}

impl SolverSettings {
    pub fn iterative() -> Self {
        SolverSettings { method: SolveMethod::Iterative, ..Self::default() }
    }

    pub fn direct() -> Self {
        SolverSettings { method: SolveMethod::Direct, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return Err(Error::param(format!("solver tolerance {} not in (0, 1)", self.tolerance)));
        }
        if self.max_iterations == Some(0) {
            return Err(Error::param("max_iterations must be positive"));
        }
        Ok(())
    }

    fn use_direct(&self, unknowns: usize) -> bool {
        match self.method {
            SolveMethod::Auto => unknowns <= self.direct_threshold,
            SolveMethod::Iterative => false,
            SolveMethod::Direct => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Dirichlet { p: Vec<f64> },
    Neumann { q: Vec<f64> },
    /// Maximizer `v(·, □, p, q)` of the combined functional.
    Combined { p: Vec<f64>, q: Vec<f64> },
    /// Dirichlet problem with prescribed (non-affine) boundary values.
    Harmonic,
}

/// Nodal solution of a block problem together with its block averages.
#[derive(Clone, Debug, Serialize)]
pub struct BlockSolution {
    pub cube: TriadicCube,
    pub kind: ProblemKind,
    /// Values at the `(3^k + 1)^d` nodes, row-major.
    pub nodal: Vec<f64>,
    /// `⨍ ½∇w·a∇w`
    pub energy: f64,
    /// Attained value of the variational problem: the energy for Dirichlet
    /// and combined problems, `q·⨍∇w − energy` for Neumann.
    pub objective: f64,
    pub mean_gradient: Vec<f64>,
    pub mean_flux: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// Assembled block problem on one cube, with factorizations cached across
/// right-hand sides.
pub struct BlockSolver<'a> {
    field: &'a CoefficientField,
    stiffness: Stiffness,
    settings: SolverSettings,
    interior: Vec<usize>,
    boundary: Vec<bool>,
    dirichlet_factor: OnceCell<DenseFactor>,
    neumann_factor: OnceCell<DenseFactor>,
}

impl<'a> BlockSolver<'a> {
    pub fn new(field: &'a CoefficientField, cube: &TriadicCube, settings: SolverSettings) -> Result<Self> {
        field.check_cube(cube)?;
        settings.validate()?;
        let stiffness = Stiffness::assemble(field, cube);
        let boundary: Vec<bool> = (0..stiffness.node_count()).map(|n| stiffness.is_boundary(n)).collect();
        let interior = (0..stiffness.node_count()).filter(|&n| !boundary[n]).collect();
        Ok(BlockSolver {
            field,
            stiffness,
            settings,
            interior,
            boundary,
            dirichlet_factor: OnceCell::new(),
            neumann_factor: OnceCell::new(),
        })
    }

    pub fn field(&self) -> &CoefficientField {
        self.field
    }

    pub fn cube(&self) -> &TriadicCube {
        self.stiffness.cube()
    }

    pub fn stiffness(&self) -> &Stiffness {
        &self.stiffness
    }

    pub fn settings(&self) -> &SolverSettings {
        &self.settings
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.boundary[node]
    }

    fn volume(&self) -> f64 {
        self.cube().volume()
    }

    fn max_iterations(&self, unknowns: usize) -> usize {
        self.settings.max_iterations.unwrap_or(10 * unknowns.max(1))
    }

    /// `⨍ ½∇w·a∇w`
    pub fn energy(&self, w: &[f64]) -> f64 {
        0.5 * self.stiffness.form(w, w) / self.volume()
    }

    /// `⨍ ∇u·a∇w`
    pub fn energy_pairing(&self, u: &[f64], w: &[f64]) -> f64 {
        self.stiffness.form(u, w) / self.volume()
    }

    pub fn cell_gradients(&self, w: &[f64]) -> Vec<f64> {
        self.stiffness.cell_gradient_integrals(w)
    }

    /// Cell-averaged fluxes `a_cell (∇w)_cell`, `d` entries per cell.
    pub fn cell_fluxes(&self, w: &[f64]) -> Vec<f64> {
        let d = self.cube().dim();
        let grads = self.cell_gradients(w);
        let mut out = vec![0.0; grads.len()];
        for (c, a) in self.stiffness.cells().iter().enumerate() {
            let f = a.mul_vec(&grads[c * d..(c + 1) * d]);
            out[c * d..(c + 1) * d].copy_from_slice(&f);
        }
        out
    }

    fn block_average(&self, per_cell: &[f64]) -> Vec<f64> {
        let d = self.cube().dim();
        let mut m = vec![0.0; d];
        for chunk in per_cell.chunks(d) {
            for (mi, x) in m.iter_mut().zip(chunk) {
                *mi += x;
            }
        }
        m.iter().map(|x| x / self.volume()).collect()
    }

    pub fn mean_gradient(&self, w: &[f64]) -> Vec<f64> {
        self.block_average(&self.cell_gradients(w))
    }

    pub fn mean_flux(&self, w: &[f64]) -> Vec<f64> {
        self.block_average(&self.cell_fluxes(w))
    }

    /// `|(K w)_interior| / (max diag K · |w|)`; zero for discrete
    /// `a`-harmonic functions.
    pub fn interior_residual(&self, w: &[f64]) -> f64 {
        let mut kw = vec![0.0; w.len()];
        self.stiffness.apply(w, &mut kw);
        let r: f64 = self.interior.iter().map(|&n| kw[n] * kw[n]).sum::<f64>().sqrt();
        let scale = self.stiffness.diagonal().iter().fold(0.0f64, |a, &b| a.max(b)) * dot(w, w).sqrt();
        if scale == 0.0 {
            0.0
        } else {
            r / scale
        }
    }

    pub fn affine(&self, p: &[f64]) -> Vec<f64> {
        self.stiffness.affine(p)
    }

    /// Neumann load `b_i = ∫ q·∇φ_i`.
    pub fn flux_load(&self, q: &[f64]) -> Vec<f64> {
        self.stiffness.flux_load(q)
    }

    fn solution(&self, kind: ProblemKind, nodal: Vec<f64>, residual: f64, iterations: usize) -> BlockSolution {
        let energy = self.energy(&nodal);
        let mean_gradient = self.mean_gradient(&nodal);
        let objective = match &kind {
            ProblemKind::Neumann { q } => dot(q, &mean_gradient) - energy,
            _ => energy,
        };
        BlockSolution {
            cube: *self.cube(),
            kind,
            mean_flux: self.mean_flux(&nodal),
            mean_gradient,
            energy,
            objective,
            nodal,
            residual,
            iterations,
        }
    }

    /// Harmonic extension of the boundary entries of `boundary_values`
    /// (interior entries are ignored). Returns nodal values, relative
    /// residual and iteration count.
    fn harmonic_extension(&self, boundary_values: &[f64]) -> Result<(Vec<f64>, f64, usize)> {
        let n = self.stiffness.node_count();
        let mut w: Vec<f64> = (0..n).map(|i| if self.boundary[i] { boundary_values[i] } else { 0.0 }).collect();
        if self.interior.is_empty() {
            return Ok((w, 0.0, 0));
        }
        let mut kb = vec![0.0; n];
        self.stiffness.apply(&w, &mut kb);
        let rhs: Vec<f64> = (0..n).map(|i| if self.boundary[i] { 0.0 } else { -kb[i] }).collect();

        let masked_apply = |x: &[f64], y: &mut [f64]| {
            self.stiffness.apply(x, y);
            for (yi, &b) in y.iter_mut().zip(&self.boundary) {
                if b {
                    *yi = 0.0;
                }
            }
        };

        let unknowns = self.interior.len();
        let (x, iterations) = if self.settings.use_direct(unknowns) {
            let factor = match self.dirichlet_factor.get() {
                Some(f) => f,
                None => {
                    let f = DenseFactor::new(self.stiffness.dense_block(&self.interior))?;
                    let _ = self.dirichlet_factor.set(f);
                    self.dirichlet_factor.get().unwrap()
                }
            };
            let compact: Vec<f64> = self.interior.iter().map(|&i| rhs[i]).collect();
            let sol = factor.solve(&compact);
            let mut x = vec![0.0; n];
            for (&i, v) in self.interior.iter().zip(sol) {
                x[i] = v;
            }
            (x, 0)
        } else {
            let diag = self.stiffness.diagonal();
            let dinv: Vec<f64> = (0..n).map(|i| if self.boundary[i] { 0.0 } else { 1.0 / diag[i] }).collect();
            let out = pcg(masked_apply, &dinv, &rhs, false, self.settings.tolerance, self.max_iterations(unknowns))?;
            (out.x, out.iterations)
        };
        let residual = true_residual(&masked_apply, &x, &rhs, false);
        for &i in &self.interior {
            w[i] = x[i];
        }
        Ok((w, residual, iterations))
    }

    /// Minimizer of the energy with boundary data `ℓ_p`.
    pub fn dirichlet(&self, p: &[f64]) -> Result<BlockSolution> {
        self.check_vector(p)?;
        let data = self.affine(p);
        let (w, residual, iterations) = self.harmonic_extension(&data)?;
        Ok(self.solution(ProblemKind::Dirichlet { p: p.to_vec() }, w, residual, iterations))
    }

    /// Discrete `a`-harmonic function with the given boundary values.
    pub fn harmonic(&self, boundary_values: &[f64]) -> Result<BlockSolution> {
        if boundary_values.len() != self.stiffness.node_count() {
            return Err(Error::param("boundary data length differs from node count"));
        }
        let (w, residual, iterations) = self.harmonic_extension(boundary_values)?;
        Ok(self.solution(ProblemKind::Harmonic, w, residual, iterations))
    }

    /// Zero-mean maximizer of `⨍ (q·∇w − ½∇w·a∇w)`.
    pub fn neumann(&self, q: &[f64]) -> Result<BlockSolution> {
        self.check_vector(q)?;
        let b = self.flux_load(q);
        let (w, residual, iterations) = self.neumann_solve(&b)?;
        Ok(self.solution(ProblemKind::Neumann { q: q.to_vec() }, w, residual, iterations))
    }

    fn neumann_solve(&self, b: &[f64]) -> Result<(Vec<f64>, f64, usize)> {
        let n = self.stiffness.node_count();
        let apply = |x: &[f64], y: &mut [f64]| self.stiffness.apply(x, y);
        let (mut w, iterations) = if self.settings.use_direct(n) {
            let factor = match self.neumann_factor.get() {
                Some(f) => f,
                None => {
                    // K + c 11^t is definite and has the zero-mean solution
                    // of K w = b whenever b sums to zero.
                    let all: Vec<usize> = (0..n).collect();
                    let mut m = self.stiffness.dense_block(&all);
                    let c = self.stiffness.diagonal().iter().sum::<f64>() / (n * n) as f64;
                    m.add_scalar_mut(c);
                    let _ = self.neumann_factor.set(DenseFactor::new(m)?);
                    self.neumann_factor.get().unwrap()
                }
            };
            let mean = b.iter().sum::<f64>() / n as f64;
            let centred: Vec<f64> = b.iter().map(|x| x - mean).collect();
            (factor.solve(&centred), 0)
        } else {
            let dinv: Vec<f64> = self.stiffness.diagonal().iter().map(|d| 1.0 / d).collect();
            let out = pcg(apply, &dinv, b, true, self.settings.tolerance, self.max_iterations(n))?;
            (out.x, out.iterations)
        };
        let mean = w.iter().sum::<f64>() / n as f64;
        w.iter_mut().for_each(|x| *x -= mean);
        let residual = true_residual(&apply, &w, b, true);
        Ok((w, residual, iterations))
    }

    /// `v(·, □, p, q) = v(·, □, p, 0) + v(·, □, 0, q)`, the Dirichlet solution
    /// with data `ℓ_{−p}` plus the Neumann solution with flux `q`.
    pub fn combined(&self, p: &[f64], q: &[f64]) -> Result<BlockSolution> {
        let minus_p: Vec<f64> = p.iter().map(|x| -x).collect();
        let dir = self.dirichlet(&minus_p)?;
        let neu = self.neumann(q)?;
        let nodal: Vec<f64> = dir.nodal.iter().zip(&neu.nodal).map(|(a, b)| a + b).collect();
        Ok(self.solution(
            ProblemKind::Combined { p: p.to_vec(), q: q.to_vec() },
            nodal,
            dir.residual.max(neu.residual),
            dir.iterations + neu.iterations,
        ))
    }

    fn check_vector(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.cube().dim() || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::param(format!("{v:?} is not a finite {}-vector", self.cube().dim())));
        }
        Ok(())
    }

    /// Pool of discrete `a`-harmonic functions with boundary values drawn
    /// uniformly from `[-1, 1]`.
    pub fn harmonic_pool(&self, count: usize, seed: u64) -> Result<Vec<BlockSolution>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let data: Vec<f64> = (0..self.stiffness.node_count())
                    .map(|i| if self.boundary[i] { rng.random_range(-1.0..=1.0) } else { 0.0 })
                    .collect();
                self.harmonic(&data)
            })
            .collect()
    }
}

pub fn assemble_stiffness(field: &CoefficientField, cube: &TriadicCube) -> Result<Stiffness> {
    field.check_cube(cube)?;
    Ok(Stiffness::assemble(field, cube))
}

pub fn solve_dirichlet(
    field: &CoefficientField,
    cube: &TriadicCube,
    p: &[f64],
    settings: &SolverSettings,
) -> Result<BlockSolution> {
    BlockSolver::new(field, cube, *settings)?.dirichlet(p)
}

pub fn solve_neumann(
    field: &CoefficientField,
    cube: &TriadicCube,
    q: &[f64],
    settings: &SolverSettings,
) -> Result<BlockSolution> {
    BlockSolver::new(field, cube, *settings)?.neumann(q)
}

pub fn solve_v(
    field: &CoefficientField,
    cube: &TriadicCube,
    p: &[f64],
    q: &[f64],
    settings: &SolverSettings,
) -> Result<BlockSolution> {
    BlockSolver::new(field, cube, *settings)?.combined(p, q)
}
