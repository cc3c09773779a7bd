//! Triadic Besov seminorms, coarse-grained ellipticity constants, the
//! multiscale defect, and the coarse-grained Poincaré check.
//!
//! Every scale sum runs over `k ≤ m`. The lattice stops at the unit cell;
//! below it all block quantities of cell-constant data equal their cell
//! values, so the `k < 0` part of each sum is a geometric series summed in
//! closed form.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::coarse::{coarse_pair_from, Bound, CoarseGrainedPair};
use crate::error::{Error, Result};
use crate::grid::{for_each_index, pow3, subcubes, CoefficientField, TriadicCube};
use crate::solver::{BlockSolver, SolverSettings};
use crate::spd::{norm, Mat, SpdMatrix};

/// Summability or integrability exponent in `[1, ∞]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Exponent {
    Finite(f64),
    Infinity,
}

impl Exponent {
    pub fn finite(self) -> Option<f64> {
        match self {
            Exponent::Finite(v) => Some(v),
            Exponent::Infinity => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        self == Exponent::Infinity
    }

    fn check(self, name: &str, min: f64) -> Result<()> {
        match self {
            Exponent::Finite(v) if v.is_finite() && v >= min => Ok(()),
            Exponent::Infinity => Ok(()),
            Exponent::Finite(v) => Err(Error::param(format!("exponent {name} = {v} must lie in [{min}, ∞]"))),
        }
    }
}

impl fmt::Display for Exponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Exponent::Finite(v) => write!(f, "{v}"),
            Exponent::Infinity => f.write_str("inf"),
        }
    }
}

impl Serialize for Exponent {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Exponent::Finite(v) => s.serialize_f64(*v),
            Exponent::Infinity => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Exponent {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(v) => Ok(Exponent::Finite(v)),
            Raw::Text(t) if matches!(t.as_str(), "inf" | "infinity" | "∞") => Ok(Exponent::Infinity),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("unrecognized exponent {t:?}"))),
        }
    }
}

/// `c_u = 1 − 3^{−u}` evaluated at `u = s·q`, with `c = 1` for `q = ∞`.
pub fn discount_constant(s: f64, q: Exponent) -> f64 {
    match q {
        Exponent::Finite(q) => 1.0 - 3f64.powf(-s * q),
        Exponent::Infinity => 1.0,
    }
}

/// Regularity exponents `s`, `t` and summability `q`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExponentSet {
    pub s: f64,
    pub t: f64,
    pub q: Exponent,
}

impl ExponentSet {
    pub fn new(s: f64, t: f64, q: Exponent) -> Result<Self> {
        let set = ExponentSet { s, t, q };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("s", self.s), ("t", self.t)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::param(format!("exponent {name} = {v} must lie in (0, 1]")));
            }
        }
        self.q.check("q", 1.0)
    }

    pub fn c_sq(&self) -> f64 {
        discount_constant(self.s, self.q)
    }

    pub fn c_tq(&self) -> f64 {
        discount_constant(self.t, self.q)
    }

    /// `s + t < 1`, the admissibility condition for coarse-grained ellipticity.
    pub fn is_admissible(&self) -> bool {
        self.s + self.t < 1.0
    }
}

/// `(Σ_{k≤m} 3^{−sq(m−k)} x_k^q)^{1/q}` for `x_0..x_m` given and
/// `x_k = tail` for all `k < 0`; `sup_k 3^{−s(m−k)} x_k` when `q = ∞`.
pub fn discounted_series(s: f64, q: Exponent, levels: &[f64], tail: f64) -> f64 {
    let m = levels.len() as i32 - 1;
    match q {
        Exponent::Finite(q) => {
            let r = 3f64.powf(-s * q);
            let mut total = 0.0;
            for (k, x) in levels.iter().enumerate() {
                total += r.powi(m - k as i32) * x.powf(q);
            }
            total += tail.powf(q) * r.powi(m) * r / (1.0 - r);
            total.powf(1.0 / q)
        }
        Exponent::Infinity => {
            let r = 3f64.powf(-s);
            let mut sup = tail * r.powi(m + 1);
            for (k, x) in levels.iter().enumerate() {
                sup = sup.max(r.powi(m - k as i32) * x);
            }
            sup
        }
    }
}

/// Averages of cell data over the partition of `□_m` at every level
/// `k = 0..m`; level `k` holds `3^{d(m−k)}` blocks of `components` values.
fn partition_averages(data: &[f64], components: usize, dim: usize, m: u32) -> Vec<Vec<f64>> {
    let side = pow3(m);
    let mut out = Vec::with_capacity(m as usize + 1);
    for k in 0..=m {
        let block = pow3(k);
        let blocks_per_axis = side / block;
        let mut sums = vec![0.0; blocks_per_axis.pow(dim as u32) * components];
        for_each_index(dim, side, |c, coords| {
            let b = coords.iter().fold(0, |acc, &x| acc * blocks_per_axis + x / block);
            for j in 0..components {
                sums[b * components + j] += data[c * components + j];
            }
        });
        let volume = block.pow(dim as u32) as f64;
        sums.iter_mut().for_each(|x| *x /= volume);
        out.push(sums);
    }
    out
}

/// `(avg_z |x_z|^p)^{1/p}` over blocks of `components` values, or the max for `p = ∞`.
fn lp_average(values: &[f64], components: usize, p: Exponent) -> f64 {
    let norms = values.chunks(components).map(norm);
    match p {
        Exponent::Finite(p) => {
            let n = values.len() / components;
            (norms.map(|x| x.powf(p)).sum::<f64>() / n as f64).powf(1.0 / p)
        }
        Exponent::Infinity => norms.fold(0.0, f64::max),
    }
}

fn check_cell_data(data: &[f64], components: usize, dim: usize, m: u32) -> Result<()> {
    if !(1..=3).contains(&dim) || components == 0 {
        return Err(Error::param("cell data needs dimension 1..=3 and at least one component"));
    }
    if m > crate::grid::MAX_AMBIENT_LEVEL {
        return Err(Error::Capacity(format!("level {m} exceeds {}", crate::grid::MAX_AMBIENT_LEVEL)));
    }
    let expected = pow3(m).pow(dim as u32) * components;
    if data.len() != expected {
        return Err(Error::param(format!("cell data has {} values, expected {expected}", data.len())));
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::param("cell data must be finite"));
    }
    Ok(())
}

/// Negative seminorm `(Σ_{k≤m} 3^{sqk}(avg_z |(f)_{z+□_k}|^p)^{q/p})^{1/q}` over the
/// partitions of `□_m`, for cell data `f` with `components` values per cell.
pub fn besov_ring(
    data: &[f64],
    components: usize,
    dim: usize,
    m: u32,
    s: f64,
    p: Exponent,
    q: Exponent,
) -> Result<f64> {
    check_cell_data(data, components, dim, m)?;
    if !(s > 0.0 && s <= 1.0) {
        return Err(Error::param(format!("s = {s} must lie in (0, 1]")));
    }
    p.check("p", 1.0)?;
    q.check("q", 1.0)?;
    let levels: Vec<f64> =
        partition_averages(data, components, dim, m).iter().map(|v| lp_average(v, components, p)).collect();
    Ok(3f64.powf(s * m as f64) * discounted_series(s, q, &levels, levels[0]))
}

/// Positive seminorm `(Σ_k 3^{−sqk}(avg_z ‖g − (g)_{z+□_k}‖^p_{L^p(z+□_k)})^{q/p})^{1/q}`
/// with cubes `z + □_k ⊆ □_m` offset by multiples of `3^{k−1}`.
///
/// Only lattice-aligned scales `k = 1..m` enter: cell-constant data has no
/// oscillation on the unit scale once cubes are aligned with cells.
pub fn besov_positive(
    data: &[f64],
    components: usize,
    dim: usize,
    m: u32,
    s: f64,
    p: Exponent,
    q: Exponent,
) -> Result<f64> {
    check_cell_data(data, components, dim, m)?;
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::param(format!("s = {s} must lie in (0, 1)")));
    }
    let p_val = match p {
        Exponent::Finite(v) if v >= 1.0 && v.is_finite() => v,
        _ => return Err(Error::param(format!("p = {p} must lie in [1, ∞)"))),
    };
    if let Exponent::Finite(v) = q {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::param(format!("q = {v} must lie in (0, ∞]")));
        }
    }
    let side = pow3(m);
    let mut levels = Vec::with_capacity(m as usize);
    for k in 1..=m {
        let block = pow3(k);
        let step = pow3(k - 1);
        let positions = (side - block) / step + 1;
        let mut total = 0.0;
        let mut count = 0usize;
        let mut origin = [0usize; 3];
        let mut cell = [0usize; 3];
        for_each_index(dim, positions, |_, pos| {
            for i in 0..dim {
                origin[i] = pos[i] * step;
            }
            let mut mean = vec![0.0; components];
            let index = |cell: &[usize]| cell.iter().fold(0, |acc, &x| acc * side + x);
            for_each_index(dim, block, |_, local| {
                for i in 0..dim {
                    cell[i] = origin[i] + local[i];
                }
                let c = index(&cell[..dim]);
                for j in 0..components {
                    mean[j] += data[c * components + j];
                }
            });
            let volume = block.pow(dim as u32) as f64;
            mean.iter_mut().for_each(|x| *x /= volume);
            let mut dev = 0.0;
            let mut diff = vec![0.0; components];
            for_each_index(dim, block, |_, local| {
                for i in 0..dim {
                    cell[i] = origin[i] + local[i];
                }
                let c = index(&cell[..dim]);
                for j in 0..components {
                    diff[j] = data[c * components + j] - mean[j];
                }
                dev += norm(&diff).powf(p_val);
            });
            total += dev / volume;
            count += 1;
        });
        levels.push((k, total / count as f64));
    }
    let value = match q {
        Exponent::Finite(q) => levels
            .iter()
            .map(|&(k, avg)| 3f64.powf(-s * q * k as f64) * avg.powf(q / p_val))
            .sum::<f64>()
            .powf(1.0 / q),
        Exponent::Infinity => {
            levels.iter().map(|&(k, avg)| 3f64.powf(-s * k as f64) * avg.powf(1.0 / p_val)).fold(0.0, f64::max)
        }
    };
    Ok(value)
}

/// Upper bound on the number of subcube solves a computation may request.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SolveBudget(pub u64);

impl Default for SolveBudget {
    fn default() -> Self {
        SolveBudget(2_000_000)
    }
}

impl SolveBudget {
    pub fn unlimited() -> Self {
        SolveBudget(u64::MAX)
    }

    pub fn check(&self, requested: u64, what: &str) -> Result<()> {
        if requested > self.0 {
            return Err(Error::Capacity(format!("{what} needs {requested} subcube solves, budget is {}", self.0)));
        }
        Ok(())
    }
}

/// Subcube solves needed for a full ladder of `□_m` in dimension `d`.
pub fn ladder_cost(dim: usize, m: u32) -> u64 {
    (1..=m).map(|k| 3u64.pow(dim as u32 * (m - k))).sum()
}

/// Coarse-grained pairs of every subcube of `□_m` at every level `0..=m`.
#[derive(Clone, Debug, Serialize)]
pub struct LadderLevel {
    pub level: u32,
    /// `max_z |a(z+□_k)|`
    pub max_a: f64,
    /// `max_z |a_*⁻¹(z+□_k)|`
    pub max_astar_inv: f64,
    #[serde(skip)]
    pub pairs: Vec<CoarseGrainedPair>,
}

#[derive(Clone, Debug, Serialize)]
pub struct MultiscaleLadder {
    pub cube: TriadicCube,
    /// Indexed by level, `0..=m`.
    pub levels: Vec<LadderLevel>,
}

fn unit_pair(cube: TriadicCube, cell: Mat) -> Result<CoarseGrainedPair> {
    let a = SpdMatrix::new(cell)?;
    Ok(CoarseGrainedPair {
        cube,
        a,
        a_star: a,
        a_star_inv: a.inverse(),
        gap: Mat::zeros(cell.dim()),
        solver_residuals: Vec::new(),
    })
}

impl MultiscaleLadder {
    /// Solves every subcube of `cube` at levels `1..=m`; unit cells are their
    /// own coarse-grained pair.
    pub fn build(
        field: &CoefficientField,
        cube: &TriadicCube,
        settings: &SolverSettings,
        budget: SolveBudget,
    ) -> Result<Self> {
        field.check_cube(cube)?;
        budget.check(ladder_cost(cube.dim(), cube.level()), "multiscale ladder")?;
        let mut levels = Vec::with_capacity(cube.level() as usize + 1);
        for k in 0..=cube.level() {
            let subs = subcubes(cube, k)?;
            let pairs: Vec<CoarseGrainedPair> = if k == 0 {
                subs.iter()
                    .map(|c| unit_pair(*c, field.cell_mat(field.cell_index(c.offset()))))
                    .collect::<Result<_>>()?
            } else {
                subs.par_iter()
                    .map(|c| coarse_pair_from(&BlockSolver::new(field, c, *settings)?))
                    .collect::<Result<_>>()?
            };
            let max_a = pairs.iter().map(|p| p.a.norm()).fold(0.0, f64::max);
            let max_astar_inv = pairs.iter().map(|p| p.a_star_inv.norm()).fold(0.0, f64::max);
            levels.push(LadderLevel { level: k, max_a, max_astar_inv, pairs });
        }
        Ok(MultiscaleLadder { cube: *cube, levels })
    }

    /// The ladder of a subcube, reusing the pairs already computed.
    pub fn restrict(&self, cube: &TriadicCube) -> Result<MultiscaleLadder> {
        if !self.cube.contains(cube) {
            return Err(Error::param(format!("{cube:?} is not inside the ladder cube")));
        }
        let levels = self.levels[..=cube.level() as usize]
            .iter()
            .map(|l| {
                let pairs: Vec<CoarseGrainedPair> =
                    l.pairs.iter().filter(|p| cube.contains(&p.cube)).cloned().collect();
                let max_a = pairs.iter().map(|p| p.a.norm()).fold(0.0, f64::max);
                let max_astar_inv = pairs.iter().map(|p| p.a_star_inv.norm()).fold(0.0, f64::max);
                LadderLevel { level: l.level, max_a, max_astar_inv, pairs }
            })
            .collect();
        Ok(MultiscaleLadder { cube: *cube, levels })
    }

    pub fn top(&self) -> &CoarseGrainedPair {
        &self.levels.last().expect("ladder has a top level").pairs[0]
    }

    pub fn level(&self, k: u32) -> &LadderLevel {
        &self.levels[k as usize]
    }

    pub fn max_a(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.max_a).collect()
    }

    pub fn max_astar_inv(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.max_astar_inv).collect()
    }

    /// `Λ_{s,q}` and `λ_{t,q}`.
    pub fn ellipticity_constants(&self, exponents: &ExponentSet) -> Result<EllipticityConstants> {
        exponents.validate()?;
        let q = exponents.q;
        let upper_levels: Vec<f64> = self.max_a().iter().map(|x| x.sqrt()).collect();
        let lower_levels: Vec<f64> = self.max_astar_inv().iter().map(|x| x.sqrt()).collect();
        let upper = weighted(exponents.c_sq(), q, discounted_series(exponents.s, q, &upper_levels, upper_levels[0]));
        let lower = weighted(exponents.c_tq(), q, discounted_series(exponents.t, q, &lower_levels, lower_levels[0]));
        Ok(EllipticityConstants { upper: upper * upper, lower: 1.0 / (lower * lower) })
    }

    /// `max_z max_{|e|=1} J(z+□_k, ā^{−1/2}e, ā^{1/2}e)` for every level.
    pub fn defect_levels(&self, abar: &SpdMatrix) -> Result<Vec<f64>> {
        if abar.dim() != self.cube.dim() {
            return Err(Error::param("reference matrix dimension differs from the field"));
        }
        let inv_sqrt = *abar.inv_sqrt().as_mat();
        Ok(self
            .levels
            .iter()
            .map(|l| l.pairs.iter().map(|p| block_defect(p, abar.as_mat(), &inv_sqrt)).fold(0.0, f64::max))
            .collect())
    }

    /// `E_{s,q}(□_m)` relative to the constant matrix `abar`.
    pub fn multiscale_defect(&self, abar: &SpdMatrix, s: f64, q: Exponent) -> Result<f64> {
        if !(s > 0.0 && s < 0.5) {
            return Err(Error::param(format!("defect exponent s = {s} must lie in (0, 1/2)")));
        }
        q.check("q", 1.0)?;
        let levels: Vec<f64> = self.defect_levels(abar)?.iter().map(|x| x.sqrt()).collect();
        Ok(weighted(discount_constant(s, q), q, discounted_series(s, q, &levels, levels[0])))
    }
}

/// `c^{1/q}·x`, with `c = 1` for `q = ∞`.
fn weighted(c: f64, q: Exponent, x: f64) -> f64 {
    match q {
        Exponent::Finite(q) => c.powf(1.0 / q) * x,
        Exponent::Infinity => x,
    }
}

/// Relative size below which a block defect is indistinguishable from
/// cancellation roundoff.
pub const DEFECT_ROUNDOFF: f64 = 1e-12;

/// Top eigenvalue of `½ ā^{−1/2}(a − a_* + (a_* − ā)a_*⁻¹(a_* − ā))ā^{−1/2}`.
///
/// The matrix is a difference of nearly equal terms when `a ≈ a_* ≈ ā`;
/// values below `DEFECT_ROUNDOFF` times the size of those terms are zero.
fn block_defect(pair: &CoarseGrainedPair, abar: &Mat, abar_inv_sqrt: &Mat) -> f64 {
    let a_star = *pair.a_star.as_mat();
    let dev = a_star - *abar;
    let inner = pair.gap + dev * *pair.a_star_inv.as_mat() * dev;
    let m = (*abar_inv_sqrt * inner * *abar_inv_sqrt).scale(0.5).symmetrize();
    let top = m.max_eigenvalue();
    let scale = abar_inv_sqrt.spectral_norm().powi(2)
        * (pair.a.norm() + a_star.spectral_norm() + abar.spectral_norm());
    if top <= DEFECT_ROUNDOFF * scale {
        0.0
    } else {
        top
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EllipticityConstants {
    /// `Λ_{s,q}(□_m)`
    pub upper: f64,
    /// `λ_{t,q}(□_m)`
    pub lower: f64,
}

pub fn ellipticity_constants(
    field: &CoefficientField,
    cube: &TriadicCube,
    exponents: &ExponentSet,
    settings: &SolverSettings,
    budget: SolveBudget,
) -> Result<EllipticityConstants> {
    MultiscaleLadder::build(field, cube, settings, budget)?.ellipticity_constants(exponents)
}

pub fn multiscale_defect(
    field: &CoefficientField,
    cube: &TriadicCube,
    abar: &SpdMatrix,
    s: f64,
    q: Exponent,
    settings: &SolverSettings,
    budget: SolveBudget,
) -> Result<f64> {
    MultiscaleLadder::build(field, cube, settings, budget)?.multiscale_defect(abar, s, q)
}

/// Both lines of the coarse-grained Poincaré inequality for one function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PoincareReport {
    /// `3^{−sm}[∇u]` against `c_{sq}^{−1/q} λ_{s,q}^{−1/2} ‖a^{1/2}∇u‖`
    pub gradient: Bound,
    /// `3^{−sm}[a∇u]` against `c_{sq}^{−1/q} Λ_{s,q}^{1/2} ‖a^{1/2}∇u‖`,
    /// only for `a`-harmonic `u`.
    pub flux: Option<Bound>,
}

/// Evaluates both Poincaré lines for the nodal function `u` on the ladder's
/// cube. The data entering the negative seminorms are cell averages of the
/// gradient and flux.
pub fn cg_poincare_check(
    ladder: &MultiscaleLadder,
    solver: &BlockSolver,
    u: &[f64],
    s: f64,
    q: Exponent,
) -> Result<PoincareReport> {
    if solver.cube() != &ladder.cube {
        return Err(Error::param("solver and ladder cover different cubes"));
    }
    if u.len() != solver.stiffness().node_count() {
        return Err(Error::param("nodal vector length differs from node count"));
    }
    let exponents = ExponentSet::new(s, s, q)?;
    let constants = ladder.ellipticity_constants(&exponents)?;
    let cube = &ladder.cube;
    let (d, m) = (cube.dim(), cube.level());
    let scale = 3f64.powf(-s * m as f64);
    let c_factor = weighted(exponents.c_sq(), q, 1.0).recip();
    let energy_norm = (2.0 * solver.energy(u)).max(0.0).sqrt();

    let grads = solver.cell_gradients(u);
    let grad_lhs = scale * besov_ring(&grads, d, d, m, s, Exponent::Finite(2.0), q)?;
    let gradient = Bound { lhs: grad_lhs, rhs: c_factor * constants.lower.powf(-0.5) * energy_norm };

    let flux = if solver.interior_residual(u) <= crate::coarse::HARMONIC_TOLERANCE {
        let fluxes = solver.cell_fluxes(u);
        let lhs = scale * besov_ring(&fluxes, d, d, m, s, Exponent::Finite(2.0), q)?;
        Some(Bound { lhs, rhs: c_factor * constants.upper.sqrt() * energy_norm })
    } else {
        None
    };
    Ok(PoincareReport { gradient, flux })
}

/// Terms of the weak-norm estimates for `v(·,□_m,p,q)`. The estimates carry
/// an unspecified dimensional constant, so the terms are reported with that
/// constant set to one and nothing is asserted.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeakNormReport {
    pub s: f64,
    pub s_prime: f64,
    pub t: f64,
    pub k: u32,
    /// `3^{−sm}‖∇v − p₀‖` in the ring seminorm with `(p, q) = (2, 1)`.
    pub gradient_lhs: f64,
    /// `3^{−tm}‖a∇v − q₀‖` likewise.
    pub flux_lhs: f64,
    /// `Σ_{j>k} 3^{−s(m−j)}(avg_z |a_*⁻¹(z+□_j)q − p − p₀|²)^{1/2}`
    pub gradient_deviation: f64,
    /// `Σ_{j>k} 3^{−t(m−j)}(avg_z |q − a(z+□_j)p − q₀|²)^{1/2}`
    pub flux_deviation: f64,
    /// `Σ_{j>k} 3^{−(s−s′)(m−j)}(avg_z J(z+□_j) − J(□_m))^{1/2}`
    pub j_increments: f64,
    /// `J(□_m,p,q)`
    pub j_top: f64,
    /// `λ_{s′,1}^{−1/2}` times `j_increments`.
    pub gradient_j_term: f64,
    /// `Λ_{s′,1}^{1/2}` times `j_increments`.
    pub flux_j_term: f64,
    /// `s^{−1/2}3^{−(s−s′)(m−k)} λ_{s′,1}^{−1/2} J(□_m)^{1/2}`
    pub gradient_boundary: f64,
    /// `s^{−1/2}3^{−(s−s′)(m−k)} Λ_{s′,1}^{1/2} J(□_m)^{1/2}`
    pub flux_boundary: f64,
    /// `s^{−1}3^{−s(m−k)}|p₀|`
    pub p0_term: f64,
    /// `s^{−1}3^{−s(m−k)}|q₀|`
    pub q0_term: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn weak_norm_diagnostics(
    ladder: &MultiscaleLadder,
    solver: &BlockSolver,
    p: &[f64],
    q: &[f64],
    p0: &[f64],
    q0: &[f64],
    s: f64,
    s_prime: f64,
    t: f64,
    k: u32,
) -> Result<WeakNormReport> {
    let cube = ladder.cube;
    let (d, m) = (cube.dim(), cube.level());
    if solver.cube() != &cube {
        return Err(Error::param("solver and ladder cover different cubes"));
    }
    if k >= m {
        return Err(Error::param(format!("weak-norm cut scale {k} must be below {m}")));
    }
    if !(s > 0.0 && s <= 1.0 && t > 0.0 && t <= 1.0) || !(s_prime >= 0.5 * s && s_prime <= s) {
        return Err(Error::param("weak-norm exponents need s, t in (0, 1] and s' in [s/2, s]"));
    }
    for v in [p, q, p0, q0] {
        if v.len() != d {
            return Err(Error::param("weak-norm vectors must have the field dimension"));
        }
    }
    let v = solver.combined(p, q)?;
    let shift = |data: Vec<f64>, by: &[f64]| -> Vec<f64> {
        data.iter().enumerate().map(|(i, x)| x - by[i % d]).collect()
    };
    let ring = |data: &[f64], r: f64| besov_ring(data, d, d, m, r, Exponent::Finite(2.0), Exponent::Finite(1.0));
    let gradient_lhs = 3f64.powf(-s * m as f64) * ring(&shift(solver.cell_gradients(&v.nodal), p0), s)?;
    let flux_lhs = 3f64.powf(-t * m as f64) * ring(&shift(solver.cell_fluxes(&v.nodal), q0), t)?;

    let j_top = ladder.top().j(p, q);
    let mut gradient_deviation = 0.0;
    let mut flux_deviation = 0.0;
    let mut j_increments = 0.0;
    for j in (k + 1)..=m {
        let pairs = &ladder.level(j).pairs;
        let n = pairs.len() as f64;
        let mut dev_g = 0.0;
        let mut dev_f = 0.0;
        let mut j_avg = 0.0;
        for pair in pairs {
            let g: Vec<f64> = pair.a_star_inv.mul_vec(q).iter().zip(p).zip(p0).map(|((a, b), c)| a - b - c).collect();
            let f: Vec<f64> = q.iter().zip(pair.a.mul_vec(p)).zip(q0).map(|((a, b), c)| a - b - c).collect();
            dev_g += norm(&g).powi(2);
            dev_f += norm(&f).powi(2);
            j_avg += pair.j(p, q);
        }
        let gap = (m - j) as f64;
        gradient_deviation += 3f64.powf(-s * gap) * (dev_g / n).sqrt();
        flux_deviation += 3f64.powf(-t * gap) * (dev_f / n).sqrt();
        j_increments += 3f64.powf(-(s - s_prime) * gap) * (j_avg / n - j_top).max(0.0).sqrt();
    }
    let constants = ladder.ellipticity_constants(&ExponentSet::new(s_prime, s_prime, Exponent::Finite(1.0))?)?;
    let lower_factor = constants.lower.powf(-0.5);
    let upper_factor = constants.upper.sqrt();
    let boundary = s.powf(-0.5) * 3f64.powf(-(s - s_prime) * (m - k) as f64) * j_top.max(0.0).sqrt();
    let decay = 3f64.powf(-s * (m - k) as f64) / s;
    Ok(WeakNormReport {
        s,
        s_prime,
        t,
        k,
        gradient_lhs,
        flux_lhs,
        gradient_deviation,
        flux_deviation,
        j_increments,
        j_top,
        gradient_j_term: lower_factor * j_increments,
        flux_j_term: upper_factor * j_increments,
        gradient_boundary: lower_factor * boundary,
        flux_boundary: upper_factor * boundary,
        p0_term: decay * norm(p0),
        q0_term: decay * norm(q0),
    })
}
