//! Monte Carlo estimates of the annealed coarse-grained matrices and of the
//! contrast `Θ_n = ā(□_n) ā_*⁻¹(□_n)` across scales.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coarse::coarse_pair_from;
use crate::error::{Error, Result};
use crate::grid::{AxisMap, CoefficientField, EnsembleSpec, TriadicCube};
use crate::multiscale::{ladder_cost, weak_norm_diagnostics, Exponent, ExponentSet, MultiscaleLadder, SolveBudget, WeakNormReport};
use crate::solver::{BlockSolver, SolverSettings};
use crate::spd::{Mat, SpdMatrix};

/// Exponents for the moment contrast `Θ̃_n = E[Λ_{ν₁,1}^ξ]^{1/ξ} E[λ_{ν₂,1}^{−ξ}]^{1/ξ}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentContrast {
    pub nu1: f64,
    pub nu2: f64,
    /// Defaults to `⌈16d / (1 − ν₁ − ν₂)⌉`.
    #[serde(default)]
    pub xi: Option<f64>,
}

impl MomentContrast {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu1 > 0.0 && self.nu2 > 0.0 && self.nu1 + self.nu2 < 1.0) {
            return Err(Error::param(format!("moment exponents ν₁ = {}, ν₂ = {} need ν₁, ν₂ > 0 and ν₁ + ν₂ < 1", self.nu1, self.nu2)));
        }
        if let Some(xi) = self.xi {
            if !(xi >= 1.0 && xi.is_finite()) {
                return Err(Error::param(format!("moment exponent ξ = {xi} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn xi(&self, dim: usize) -> f64 {
        self.xi.unwrap_or_else(|| (16.0 * dim as f64 / (1.0 - self.nu1 - self.nu2)).ceil())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSettings {
    pub samples: usize,
    /// Average every sample over the signed axis permutations. `None`
    /// enables it exactly for isotropic ensembles.
    pub symmetrize: Option<bool>,
    pub solver: SolverSettings,
    pub budget: SolveBudget,
    pub moment_contrast: Option<MomentContrast>,
}

impl Default for FlowSettings {
    fn default() -> Self {
        FlowSettings {
            samples: 32,
            symmetrize: None,
            solver: SolverSettings::default(),
            budget: SolveBudget::default(),
            moment_contrast: None,
        }
    }
}

impl FlowSettings {
    pub fn with_samples(samples: usize) -> Self {
        FlowSettings { samples, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::param(format!("at least 2 samples are needed, got {}", self.samples)));
        }
        self.solver.validate()?;
        if let Some(m) = &self.moment_contrast {
            m.validate()?;
        }
        Ok(())
    }

    fn symmetrize_for(&self, spec: &EnsembleSpec) -> bool {
        self.symmetrize.unwrap_or_else(|| spec.is_isotropic())
    }
}

/// Average of `R^t A R` over all signed permutations `R`; equals
/// `(tr A / d) I`. The trace is checked to survive the averaging.
pub fn isotropic_average(a: &Mat) -> Result<Mat> {
    let group = AxisMap::group(a.dim());
    let mut sum = Mat::zeros(a.dim());
    for r in &group {
        sum = sum + r.conjugate(a);
    }
    let avg = sum.scale(1.0 / group.len() as f64);
    let (before, after) = (a.trace(), avg.trace());
    if (before - after).abs() > 1e-12 * before.abs().max(f64::MIN_POSITIVE) {
        return Err(Error::Consistency(format!("isotropic averaging changed the trace from {before} to {after}")));
    }
    Ok(avg)
}

/// Per-sample block matrices at each level, averaged over the tiling.
#[derive(Clone, Debug)]
struct SampleLevels {
    abar: Vec<Mat>,
    astar_inv: Vec<Mat>,
    /// `(Λ_{ν₁,1}(□_n), λ_{ν₂,1}(□_n))` per level when requested.
    moments: Option<Vec<(f64, f64)>>,
}

fn sample_seed(spec: &EnsembleSpec, i: usize) -> EnsembleSpec {
    spec.with_seed(spec.seed.wrapping_add(i as u64))
}

fn is_abortable(e: &Error) -> bool {
    matches!(e, Error::Convergence { .. } | Error::Consistency(_))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean.
fn standard_error(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

fn covariance_of_means(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (mean(xs), mean(ys));
    xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / (n - 1.0) / n
}

fn mat_mean(ms: &[Mat]) -> Mat {
    let mut sum = Mat::zeros(ms[0].dim());
    for m in ms {
        sum = sum + *m;
    }
    sum.scale(1.0 / ms.len() as f64)
}

fn mat_se(ms: &[Mat]) -> Mat {
    let d = ms[0].dim();
    let mut out = Mat::zeros(d);
    for i in 0..d {
        for j in 0..d {
            let xs: Vec<f64> = ms.iter().map(|m| m.get(i, j)).collect();
            out.set(i, j, standard_error(&xs));
        }
    }
    out
}

fn scalarize(m: &Mat) -> f64 {
    m.trace() / m.dim() as f64
}

fn finalize(samples: Vec<Result<SampleLevels>>) -> Result<(Vec<SampleLevels>, usize)> {
    let total = samples.len();
    let mut used = Vec::with_capacity(total);
    let mut aborted = 0;
    for s in samples {
        match s {
            Ok(s) => used.push(s),
            Err(e) if is_abortable(&e) => aborted += 1,
            Err(e) => return Err(e),
        }
    }
    if aborted * 10 > total || used.len() < 2 {
        return Err(Error::Reliability { aborted, total });
    }
    Ok((used, aborted))
}

/// Sample means and standard errors of `a(□_n)` and `a_*⁻¹(□_n)`.
#[derive(Clone, Debug, Serialize)]
pub struct AnnealedEstimate {
    pub level: u32,
    pub samples: usize,
    pub aborted: usize,
    pub symmetrized: bool,
    pub abar: Mat,
    pub abar_se: Mat,
    pub astar_inv: Mat,
    pub astar_inv_se: Mat,
}

/// Estimates `ā(□_n)` and `ā_*⁻¹(□_n)` from independent fields on `□_n`
/// with seeds `seed + i`.
pub fn estimate_annealed(
    spec: &EnsembleSpec,
    dim: usize,
    level: u32,
    settings: &FlowSettings,
) -> Result<AnnealedEstimate> {
    spec.validate()?;
    settings.validate()?;
    settings.budget.check(settings.samples as u64 * u64::from(level > 0), "annealed estimate")?;
    let symmetrize = settings.symmetrize_for(spec);
    let results: Vec<Result<SampleLevels>> = (0..settings.samples)
        .into_par_iter()
        .map(|i| {
            let field = CoefficientField::generate(&sample_seed(spec, i), dim, level)?;
            let cube = field.ambient();
            let (mut a, mut b) = if level == 0 {
                let cell = field.cell_mat(0);
                (cell, cell.try_inverse().expect("cells are definite"))
            } else {
                let pair = coarse_pair_from(&BlockSolver::new(&field, &cube, settings.solver)?)?;
                (*pair.a.as_mat(), *pair.a_star_inv.as_mat())
            };
            if symmetrize {
                a = isotropic_average(&a)?;
                b = isotropic_average(&b)?;
            }
            Ok(SampleLevels { abar: vec![a], astar_inv: vec![b], moments: None })
        })
        .collect();
    let (used, aborted) = finalize(results)?;
    let a: Vec<Mat> = used.iter().map(|s| s.abar[0]).collect();
    let b: Vec<Mat> = used.iter().map(|s| s.astar_inv[0]).collect();
    Ok(AnnealedEstimate {
        level,
        samples: used.len(),
        aborted,
        symmetrized: symmetrize,
        abar: mat_mean(&a),
        abar_se: mat_se(&a),
        astar_inv: mat_mean(&b),
        astar_inv_se: mat_se(&b),
    })
}

/// Estimates at one scale of the flow.
#[derive(Clone, Debug, Serialize)]
pub struct FlowLevel {
    pub n: u32,
    pub samples: usize,
    pub abar: Mat,
    pub abar_se: Mat,
    pub astar_inv: Mat,
    pub astar_inv_se: Mat,
    pub abar_scalar: f64,
    pub abar_scalar_se: f64,
    pub astar_inv_scalar: f64,
    pub astar_inv_scalar_se: f64,
    /// `Θ_n`, with a delta-method standard error.
    pub theta: f64,
    pub theta_se: f64,
    /// `τ_{n,n−1}` at the canonical `(p, q)` of this scale.
    pub tau_prev: Option<f64>,
    pub tau_prev_se: Option<f64>,
    /// `Θ̃_n` when requested.
    pub theta_moment: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct FlowRecord {
    pub dimension: usize,
    pub max_level: u32,
    pub ensemble: EnsembleSpec,
    pub samples_requested: usize,
    pub aborted: usize,
    pub symmetrized: bool,
    pub moment_contrast: Option<MomentContrast>,
    pub levels: Vec<FlowLevel>,
    #[serde(skip)]
    per_sample: Vec<SampleLevels>,
}

/// `τ_{n,k}(p,q)` with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TauEstimate {
    pub n: u32,
    pub k: u32,
    pub estimate: f64,
    pub se: f64,
}

/// Canonical test vectors `p = m₀^{−1/2}e₁`, `q = m₀^{1/2}e₁` with `m₀` the
/// geometric mean of `ā` and `ā_*`.
pub fn canonical_pq(abar_scalar: f64, astar_inv_scalar: f64, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let m0 = (abar_scalar / astar_inv_scalar).sqrt();
    let mut p = vec![0.0; dim];
    let mut q = vec![0.0; dim];
    p[0] = m0.powf(-0.5);
    q[0] = m0.sqrt();
    (p, q)
}

impl FlowRecord {
    fn from_samples(
        spec: &EnsembleSpec,
        dim: usize,
        max_level: u32,
        requested: usize,
        aborted: usize,
        symmetrized: bool,
        moment_contrast: Option<MomentContrast>,
        per_sample: Vec<SampleLevels>,
    ) -> Self {
        let mut record = FlowRecord {
            dimension: dim,
            max_level,
            ensemble: spec.clone(),
            samples_requested: requested,
            aborted,
            symmetrized,
            moment_contrast,
            levels: Vec::new(),
            per_sample,
        };
        for n in 0..=max_level {
            let level = record.level_estimate(n);
            record.levels.push(level);
        }
        record
    }

    fn level_estimate(&self, n: u32) -> FlowLevel {
        let idx = n as usize;
        let a: Vec<Mat> = self.per_sample.iter().map(|s| s.abar[idx]).collect();
        let b: Vec<Mat> = self.per_sample.iter().map(|s| s.astar_inv[idx]).collect();
        let xs: Vec<f64> = a.iter().map(scalarize).collect();
        let ys: Vec<f64> = b.iter().map(scalarize).collect();
        let (ma, mb) = (mean(&xs), mean(&ys));
        let (sa, sb) = (standard_error(&xs), standard_error(&ys));
        let cov = covariance_of_means(&xs, &ys);
        let theta_var = mb * mb * sa * sa + ma * ma * sb * sb + 2.0 * ma * mb * cov;
        let (tau_prev, tau_prev_se) = if n == 0 {
            (None, None)
        } else {
            let (p, q) = canonical_pq(ma, mb, self.dimension);
            let t = self.tau_at(n, n - 1, &p, &q);
            (Some(t.estimate), Some(t.se))
        };
        let theta_moment = self.moment_contrast.as_ref().map(|m| {
            let xi = m.xi(self.dimension);
            let moments: Vec<(f64, f64)> = self
                .per_sample
                .iter()
                .map(|s| s.moments.as_ref().expect("moments recorded when requested")[idx])
                .collect();
            let upper = moments.iter().map(|(u, _)| u.powf(xi)).sum::<f64>() / moments.len() as f64;
            let lower = moments.iter().map(|(_, l)| l.powf(-xi)).sum::<f64>() / moments.len() as f64;
            upper.powf(1.0 / xi) * lower.powf(1.0 / xi)
        });
        FlowLevel {
            n,
            samples: self.per_sample.len(),
            abar: mat_mean(&a),
            abar_se: mat_se(&a),
            astar_inv: mat_mean(&b),
            astar_inv_se: mat_se(&b),
            abar_scalar: ma,
            abar_scalar_se: sa,
            astar_inv_scalar: mb,
            astar_inv_scalar_se: sb,
            theta: ma * mb,
            theta_se: theta_var.max(0.0).sqrt(),
            tau_prev,
            tau_prev_se,
            theta_moment,
        }
    }

    fn tau_at(&self, n: u32, k: u32, p: &[f64], q: &[f64]) -> TauEstimate {
        let diffs: Vec<f64> = self
            .per_sample
            .iter()
            .map(|s| {
                let da = s.abar[k as usize] - s.abar[n as usize];
                let db = s.astar_inv[k as usize] - s.astar_inv[n as usize];
                0.5 * da.quad(p) + 0.5 * db.quad(q)
            })
            .collect();
        let da = mat_mean(&self.per_sample.iter().map(|s| s.abar[k as usize]).collect::<Vec<_>>())
            - mat_mean(&self.per_sample.iter().map(|s| s.abar[n as usize]).collect::<Vec<_>>());
        let db = mat_mean(&self.per_sample.iter().map(|s| s.astar_inv[k as usize]).collect::<Vec<_>>())
            - mat_mean(&self.per_sample.iter().map(|s| s.astar_inv[n as usize]).collect::<Vec<_>>());
        TauEstimate { n, k, estimate: 0.5 * da.quad(p) + 0.5 * db.quad(q), se: standard_error(&diffs) }
    }

    /// `τ_{n,k}(p,q) = ½p·(ā(□_k) − ā(□_n))p + ½q·(ā_*⁻¹(□_k) − ā_*⁻¹(□_n))q`
    /// from the pooled estimates; the standard error comes from paired
    /// per-sample differences.
    pub fn tau(&self, n: u32, k: u32, p: &[f64], q: &[f64]) -> Result<TauEstimate> {
        if k >= n || n > self.max_level {
            return Err(Error::param(format!("τ needs k < n ≤ {}, got n = {n}, k = {k}", self.max_level)));
        }
        if p.len() != self.dimension || q.len() != self.dimension {
            return Err(Error::param("τ vectors must have the field dimension"));
        }
        Ok(self.tau_at(n, k, p, q))
    }

    pub fn abar_scalars(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.abar_scalar).collect()
    }

    pub fn astar_inv_scalars(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.astar_inv_scalar).collect()
    }

    pub fn thetas(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.theta).collect()
    }

    pub const CSV_HEADER: &'static str =
        "n,samples,abar_scalar,abar_se,astar_inv_scalar,astar_inv_se,theta,theta_se,tau_prev,tau_prev_se";

    /// One row per scale; floats in shortest round-trip form, `τ` blank at `n = 0`.
    pub fn to_csv(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for l in &self.levels {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                l.n,
                l.samples,
                l.abar_scalar,
                l.abar_scalar_se,
                l.astar_inv_scalar,
                l.astar_inv_scalar_se,
                l.theta,
                l.theta_se,
                opt(l.tau_prev),
                opt(l.tau_prev_se)
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Runs the flow on fields sampled over `□_N`. The value of a sample at
/// level `n` is the average of `a` and `a_*⁻¹` over the tiling of `□_N` by
/// level-`n` subcubes, so every level uses the same realization.
pub fn run_flow(spec: &EnsembleSpec, dim: usize, max_level: u32, settings: &FlowSettings) -> Result<FlowRecord> {
    spec.validate()?;
    settings.validate()?;
    settings.budget.check(settings.samples as u64 * ladder_cost(dim, max_level), "flow")?;
    let symmetrize = settings.symmetrize_for(spec);
    let moment = settings.moment_contrast;
    let results: Vec<Result<SampleLevels>> = (0..settings.samples)
        .into_par_iter()
        .map(|i| {
            let field = CoefficientField::generate(&sample_seed(spec, i), dim, max_level)?;
            let ladder =
                MultiscaleLadder::build(&field, &field.ambient(), &settings.solver, SolveBudget::unlimited())?;
            let mut abar = Vec::with_capacity(max_level as usize + 1);
            let mut astar_inv = Vec::with_capacity(max_level as usize + 1);
            for level in &ladder.levels {
                let a: Vec<Mat> = level.pairs.iter().map(|p| *p.a.as_mat()).collect();
                let b: Vec<Mat> = level.pairs.iter().map(|p| *p.a_star_inv.as_mat()).collect();
                let (mut a, mut b) = (mat_mean(&a), mat_mean(&b));
                if symmetrize {
                    a = isotropic_average(&a)?;
                    b = isotropic_average(&b)?;
                }
                abar.push(a);
                astar_inv.push(b);
            }
            let moments = match &moment {
                Some(m) => {
                    let exps = ExponentSet::new(m.nu1, m.nu2, Exponent::Finite(1.0))?;
                    let mut out = Vec::with_capacity(max_level as usize + 1);
                    for n in 0..=max_level {
                        let sub = ladder.restrict(&TriadicCube::origin(dim, n))?;
                        let c = sub.ellipticity_constants(&exps)?;
                        out.push((c.upper, c.lower));
                    }
                    Some(out)
                }
                None => None,
            };
            Ok(SampleLevels { abar, astar_inv, moments })
        })
        .collect();
    let (used, aborted) = finalize(results)?;
    Ok(FlowRecord::from_samples(spec, dim, max_level, settings.samples, aborted, symmetrize, moment, used))
}

/// `τ_{n,k}(p,q)` from a flow over `□_n`.
#[allow(clippy::too_many_arguments)]
pub fn tau(
    spec: &EnsembleSpec,
    dim: usize,
    n: u32,
    k: u32,
    p: &[f64],
    q: &[f64],
    settings: &FlowSettings,
) -> Result<TauEstimate> {
    if k >= n {
        return Err(Error::param(format!("τ needs k < n, got n = {n}, k = {k}")));
    }
    run_flow(spec, dim, n, settings)?.tau(n, k, p, q)
}

/// Ratios checked at one candidate scale of the pigeonhole scan.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PigeonholeWitness {
    pub n: u32,
    /// `ā(□_{n−h}) / ā(□_n)`
    pub abar_ratio: f64,
    /// `ā_*⁻¹(□_{n−h}) / ā_*⁻¹(□_n)`
    pub astar_inv_ratio: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum PigeonholeOutcome {
    GoodScale { n: u32 },
    Contracted,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PigeonholeResult {
    pub outcome: PigeonholeOutcome,
    pub delta: f64,
    pub sigma: f64,
    pub h: u32,
    pub max_level: u32,
    /// `⌈2δ⁻¹|log σ|⌉`
    pub steps: u32,
    /// `Θ_N / Θ_0`
    pub contraction: f64,
    pub witnesses: Vec<PigeonholeWitness>,
}

/// Scale selection on scalar annealed sequences indexed by level `0..=N`:
/// the first `n ∈ {h..N}` with both ratios `≤ 1 + δ`, else `Θ_N ≤ σΘ_0`.
pub fn pigeonhole_scalars(
    abar: &[f64],
    astar_inv: &[f64],
    delta: f64,
    sigma: f64,
    h: u32,
) -> Result<PigeonholeResult> {
    if !(delta > 0.0 && delta <= 0.5) || !(sigma > 0.0 && sigma <= 0.5) {
        return Err(Error::param(format!("δ = {delta} and σ = {sigma} must lie in (0, 1/2]")));
    }
    if h == 0 {
        return Err(Error::param("h must be at least 1"));
    }
    if abar.len() != astar_inv.len() || abar.is_empty() {
        return Err(Error::param("annealed sequences must be nonempty and of equal length"));
    }
    if abar.iter().chain(astar_inv).any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(Error::param("annealed sequences must be positive"));
    }
    let max_level = abar.len() as u32 - 1;
    let steps = (2.0 / delta * sigma.ln().abs()).ceil() as u32;
    if max_level < steps * h {
        return Err(Error::param(format!("N = {max_level} is below ⌈2δ⁻¹|log σ|⌉·h = {}", steps * h)));
    }
    let mut witnesses = Vec::new();
    let bound = 1.0 + delta;
    let contraction = abar[max_level as usize] * astar_inv[max_level as usize] / (abar[0] * astar_inv[0]);
    let mut outcome = None;
    for n in h..=max_level {
        let w = PigeonholeWitness {
            n,
            abar_ratio: abar[(n - h) as usize] / abar[n as usize],
            astar_inv_ratio: astar_inv[(n - h) as usize] / astar_inv[n as usize],
        };
        witnesses.push(w);
        if w.abar_ratio <= bound && w.astar_inv_ratio <= bound {
            outcome = Some(PigeonholeOutcome::GoodScale { n });
            break;
        }
    }
    let outcome = match outcome {
        Some(o) => o,
        None if contraction <= sigma => PigeonholeOutcome::Contracted,
        None => {
            let product: f64 = (1..=steps)
                .map(|j| {
                    let (hi, lo) = ((j * h) as usize, ((j - 1) * h) as usize);
                    abar[hi] / abar[lo] * astar_inv[hi] / astar_inv[lo]
                })
                .product();
            return Err(Error::NoiseInconsistency { product, target: sigma });
        }
    };
    Ok(PigeonholeResult { outcome, delta, sigma, h, max_level, steps, contraction, witnesses })
}

/// Scale selection on the point estimates of a flow record.
pub fn pigeonhole_select(record: &FlowRecord, delta: f64, sigma: f64, h: u32) -> Result<PigeonholeResult> {
    pigeonhole_scalars(&record.abar_scalars(), &record.astar_inv_scalars(), delta, sigma, h)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum HomogenizationScale {
    /// Smallest `n` with `Θ̂_n ≤ 1 + σ`; `confident` when `Θ̂_n + 2·SE ≤ 1 + σ`.
    Reached { n: u32, confident: bool },
    NotReached,
}

impl HomogenizationScale {
    pub fn scale(&self) -> Option<u32> {
        match self {
            HomogenizationScale::Reached { n, .. } => Some(*n),
            HomogenizationScale::NotReached => None,
        }
    }
}

/// First scale of the record at which the contrast is within `1 + σ`.
pub fn homogenization_scale_of(record: &FlowRecord, sigma: f64) -> Result<HomogenizationScale> {
    if !(sigma > 0.0 && sigma <= 0.5) {
        return Err(Error::param(format!("σ = {sigma} must lie in (0, 1/2]")));
    }
    Ok(record
        .levels
        .iter()
        .find(|l| l.theta <= 1.0 + sigma)
        .map(|l| HomogenizationScale::Reached { n: l.n, confident: l.theta + 2.0 * l.theta_se <= 1.0 + sigma })
        .unwrap_or(HomogenizationScale::NotReached))
}

pub fn homogenization_scale(
    spec: &EnsembleSpec,
    dim: usize,
    sigma: f64,
    max_level: u32,
    settings: &FlowSettings,
) -> Result<(HomogenizationScale, FlowRecord)> {
    if !(sigma > 0.0 && sigma <= 0.5) {
        return Err(Error::param(format!("σ = {sigma} must lie in (0, 1/2]")));
    }
    let record = run_flow(spec, dim, max_level, settings)?;
    Ok((homogenization_scale_of(&record, sigma)?, record))
}

/// Exponents of the weak-norm diagnostics used by the contraction report.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeakNormExponents {
    pub s: f64,
    pub s_prime: f64,
    pub t: f64,
}

impl Default for WeakNormExponents {
    fn default() -> Self {
        WeakNormExponents { s: 0.5, s_prime: 0.25, t: 0.5 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ContractionReport {
    pub scale: u32,
    pub h: u32,
    pub delta: f64,
    /// `m₀ = (ā ā_*)^{1/2}` at the selected scale.
    pub m0: f64,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub p0: Vec<f64>,
    pub q0: Vec<f64>,
    /// `τ_{n,n−h}` at the canonical `(p, q)`.
    pub tau: TauEstimate,
    /// `(Θ_n − 1) / Θ_0`
    pub realized_ratio: f64,
    /// `δ^{1/4}`
    pub delta_quarter: f64,
    /// Weak-norm terms on the selected cube, one entry per diagnostic sample.
    pub weak_norms: Vec<WeakNormReport>,
}

/// Measurable ingredients of the contraction step at the pigeonhole scale.
/// Nothing here is asserted; the underlying estimates carry unspecified
/// constants.
#[allow(clippy::too_many_arguments)]
pub fn contraction_diagnostics(
    record: &FlowRecord,
    pigeonhole: &PigeonholeResult,
    exponents: &WeakNormExponents,
    diagnostic_samples: usize,
    settings: &FlowSettings,
) -> Result<ContractionReport> {
    let scale = match pigeonhole.outcome {
        PigeonholeOutcome::GoodScale { n } => n,
        PigeonholeOutcome::Contracted => {
            return Err(Error::Precondition("contraction diagnostics need a good scale".into()))
        }
    };
    let h = pigeonhole.h;
    let d = record.dimension;
    let level = &record.levels[scale as usize];
    let (abar, astar_inv) = (level.abar_scalar, level.astar_inv_scalar);
    let m0 = (abar / astar_inv).sqrt();
    let (p, q) = canonical_pq(abar, astar_inv, d);
    let p0: Vec<f64> = p.iter().zip(&q).map(|(p, q)| astar_inv * q - p).collect();
    let q0: Vec<f64> = p.iter().zip(&q).map(|(p, q)| q - abar * p).collect();
    let tau = record.tau(scale, scale - h, &p, &q)?;
    let theta0 = record.levels[0].theta;
    let weak_norms = (0..diagnostic_samples)
        .into_par_iter()
        .map(|i| {
            let field = CoefficientField::generate(&sample_seed(&record.ensemble, i), d, scale)?;
            let cube = field.ambient();
            let ladder = MultiscaleLadder::build(&field, &cube, &settings.solver, settings.budget)?;
            let solver = BlockSolver::new(&field, &cube, settings.solver)?;
            weak_norm_diagnostics(
                &ladder,
                &solver,
                &p,
                &q,
                &p0,
                &q0,
                exponents.s,
                exponents.s_prime,
                exponents.t,
                scale - h,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ContractionReport {
        scale,
        h,
        delta: pigeonhole.delta,
        m0,
        p,
        q,
        p0,
        q0,
        tau,
        realized_ratio: (level.theta - 1.0) / theta0,
        delta_quarter: pigeonhole.delta.powf(0.25),
        weak_norms,
    })
}

/// Constant matrix `ā` for the multiscale defect: the symmetrized estimate
/// of `ā(□_N)` at the top scale of a record.
pub fn reference_matrix(record: &FlowRecord) -> Result<SpdMatrix> {
    let top = record.levels.last().ok_or_else(|| Error::param("empty flow record"))?;
    SpdMatrix::scalar(record.dimension, top.abar_scalar)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_ensemble_flow_is_flat() {
        let spec = EnsembleSpec::constant(2.0);
        let record = run_flow(&spec, 2, 2, &FlowSettings::with_samples(3)).unwrap();
        for l in &record.levels {
            assert!((l.theta - 1.0).abs() < 1e-10);
            assert!(l.theta_se < 1e-10);
            assert!((l.abar_scalar - 2.0).abs() < 1e-10);
        }
        assert!(record.levels[1].tau_prev.unwrap().abs() < 1e-10);
        let hs = homogenization_scale_of(&record, 0.5).unwrap();
        assert_eq!(hs, HomogenizationScale::Reached { n: 0, confident: true });
    }

    #[test]
    fn degenerate_two_phase_is_exact() {
        let spec = EnsembleSpec::two_phase(1.0, 10.0, 0.1, 3);
        let est = estimate_annealed(&spec, 2, 2, &FlowSettings::with_samples(4)).unwrap();
        assert!((est.abar.get(0, 0) - 10.0).abs() < 1e-10 && est.abar.get(0, 1).abs() < 1e-12);
        assert!(est.abar_se.max_abs() < 1e-10);
    }

    #[test]
    fn symmetrized_estimates_are_scalar() {
        let spec = EnsembleSpec::two_phase(0.5, 10.0, 0.1, 1);
        let est = estimate_annealed(&spec, 2, 1, &FlowSettings::with_samples(8)).unwrap();
        assert_eq!(est.abar.get(0, 1), 0.0);
        assert!((est.abar.get(0, 0) - est.abar.get(1, 1)).abs() < 1e-14);
    }

    #[test]
    fn isotropic_average_is_trace_over_d() {
        let a = Mat::from_row_major(3, &[3.0, 1.0, 0.5, 1.0, 2.0, 0.2, 0.5, 0.2, 1.0]).unwrap();
        let avg = isotropic_average(&a).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 2.0 } else { 0.0 };
                assert!((avg.get(i, j) - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn pigeonhole_examples() {
        let flat = pigeonhole_scalars(&[1.0; 5], &[1.0; 5], 0.5, 0.5, 1).unwrap();
        assert_eq!(flat.outcome, PigeonholeOutcome::GoodScale { n: 1 });
        let halving: Vec<f64> = (0..4).map(|n| 0.5f64.powi(n)).collect();
        let r = pigeonhole_scalars(&halving, &[1.0; 4], 0.5, 0.5, 1).unwrap();
        assert_eq!(r.outcome, PigeonholeOutcome::Contracted);
        assert!((r.contraction - 0.125).abs() < 1e-15);
        let step = [8.0, 4.0, 4.0, 2.0];
        let r = pigeonhole_scalars(&step, &[1.0; 4], 0.5, 0.5, 1).unwrap();
        assert_eq!(r.outcome, PigeonholeOutcome::GoodScale { n: 2 });
    }

    #[test]
    fn pigeonhole_rejects_short_records_and_flags_noise() {
        assert!(matches!(pigeonhole_scalars(&[1.0; 2], &[1.0; 2], 0.1, 0.1, 1), Err(Error::Parameter(_))));
        // oscillating estimates: no good scale, yet no contraction either
        let r = pigeonhole_scalars(&[4.0, 1.0, 4.0, 1.0], &[1.0, 4.0, 1.0, 4.0], 0.5, 0.5, 1);
        assert!(matches!(r, Err(Error::NoiseInconsistency { .. })));
    }

    #[test]
    fn csv_layout() {
        let record = run_flow(&EnsembleSpec::constant(1.5), 1, 1, &FlowSettings::with_samples(2)).unwrap();
        let csv = record.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], FlowRecord::CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].ends_with(",,"));
        assert_eq!(lines[1].split(',').nth(2).unwrap(), "1.5");
    }

    #[test]
    fn moment_contrast_bounds_theta() {
        let spec = EnsembleSpec::two_phase(0.5, 4.0, 0.25, 2);
        let settings = FlowSettings {
            samples: 4,
            moment_contrast: Some(MomentContrast { nu1: 0.2, nu2: 0.2, xi: None }),
            ..FlowSettings::default()
        };
        let record = run_flow(&spec, 2, 1, &settings).unwrap();
        for l in &record.levels {
            assert!(l.theta_moment.unwrap() >= l.theta * (1.0 - 1e-12));
        }
        assert_eq!(settings.moment_contrast.unwrap().xi(2), 54.0);
    }

    #[test]
    fn too_few_samples_rejected() {
        let r = run_flow(&EnsembleSpec::constant(1.0), 1, 1, &FlowSettings::with_samples(1));
        assert!(matches!(r, Err(Error::Parameter(_))));
    }
}
