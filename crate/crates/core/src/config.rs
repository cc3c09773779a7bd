//! Run configuration: one strict JSON document per experiment.
//!
//! Physical parameters have no defaults; solver knobs, budget and output
//! names do. Unknown keys are rejected at every level.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowSettings, MomentContrast, WeakNormExponents};
use crate::grid::{EnsembleKind, EnsembleSpec, TriadicCube, MAX_AMBIENT_LEVEL};
use crate::multiscale::{Exponent, ExponentSet, SolveBudget};
use crate::solver::SolverSettings;
use crate::spd::MAX_DIM;
use crate::verify::VerifySettings;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExponentConfig {
    pub s: f64,
    pub t: f64,
    pub q: Exponent,
    #[serde(default)]
    pub nu1: Option<f64>,
    #[serde(default)]
    pub nu2: Option<f64>,
    #[serde(default)]
    pub xi: Option<f64>,
}

impl ExponentConfig {
    pub fn exponent_set(&self) -> Result<ExponentSet> {
        ExponentSet::new(self.s, self.t, self.q)
    }

    /// Present when both `nu1` and `nu2` are set.
    pub fn moment_contrast(&self) -> Result<Option<MomentContrast>> {
        match (self.nu1, self.nu2) {
            (Some(nu1), Some(nu2)) => {
                let m = MomentContrast { nu1, nu2, xi: self.xi };
                m.validate()?;
                Ok(Some(m))
            }
            (None, None) if self.xi.is_none() => Ok(None),
            _ => Err(Error::param("nu1 and nu2 must be given together, and xi only with them")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CubeConfig {
    pub level: u32,
    pub offset: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoarseGrainOptions {
    pub cubes: Vec<CubeConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PigeonholeConfig {
    pub delta: f64,
    pub sigma: f64,
    pub h: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub samples: usize,
    #[serde(default)]
    pub exponents: WeakNormExponents,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowOptions {
    #[serde(default)]
    pub pigeonhole: Option<PigeonholeConfig>,
    #[serde(default)]
    pub find_scale: Option<f64>,
    /// Cell contrasts of the symmetric two-phase law; replaces `ensemble`.
    #[serde(default)]
    pub contrast_sweep: Option<Vec<f64>>,
    #[serde(default)]
    pub symmetrize: Option<bool>,
    /// Weak-norm report at the pigeonhole scale.
    #[serde(default)]
    pub diagnostics: Option<DiagnosticsConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefectConfig {
    pub s: f64,
    pub q: Exponent,
    /// Scalar reference `ā`; the top-level `tr a(□)/d` when absent.
    #[serde(default)]
    pub reference: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsOptions {
    #[serde(default)]
    pub defect: Option<DefectConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BesovOptions {
    pub s: f64,
    pub p: Exponent,
    pub q: Exponent,
    /// Random harmonic functions evaluated besides `v(·,□,e₁,0)` and `v(·,□,0,e₁)`.
    #[serde(default)]
    pub harmonic_functions: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// File stem for the outputs; each subcommand has its own default.
    #[serde(default)]
    pub stem: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dimension: usize,
    /// Ambient level of generated fields and top scale of the flow.
    pub level: u32,
    pub ensemble: EnsembleKind,
    pub seed: u64,
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default)]
    pub exponents: Option<ExponentConfig>,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub budget: SolveBudget,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub coarse_grain: Option<CoarseGrainOptions>,
    #[serde(default)]
    pub flow: Option<FlowOptions>,
    #[serde(default)]
    pub constants: Option<ConstantsOptions>,
    #[serde(default)]
    pub besov: Option<BesovOptions>,
    #[serde(default)]
    pub verify: Option<VerifySettings>,
}

impl RunConfig {
    /// Parses and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn ensemble_spec(&self) -> EnsembleSpec {
        EnsembleSpec::new(self.ensemble.clone(), self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_DIM).contains(&self.dimension) {
            return Err(Error::param(format!("dimension {} must lie in 1..={MAX_DIM}", self.dimension)));
        }
        if self.level > MAX_AMBIENT_LEVEL {
            return Err(Error::param(format!("level {} exceeds {MAX_AMBIENT_LEVEL}", self.level)));
        }
        self.ensemble_spec().validate()?;
        self.solver.validate()?;
        if let Some(samples) = self.samples {
            if samples < 2 {
                return Err(Error::param(format!("samples = {samples} must be at least 2")));
            }
        }
        if let Some(e) = &self.exponents {
            e.exponent_set()?;
            e.moment_contrast()?;
        }
        if let Some(stem) = &self.output.stem {
            if stem.is_empty() || stem.contains(['/', '\\']) {
                return Err(Error::param(format!("output stem {stem:?} must be a plain file name")));
            }
        }
        if let Some(cg) = &self.coarse_grain {
            for c in &cg.cubes {
                self.cube(c)?;
            }
        }
        if let Some(flow) = &self.flow {
            if let Some(p) = &flow.pigeonhole {
                check_unit_half("delta", p.delta)?;
                check_unit_half("sigma", p.sigma)?;
                if p.h == 0 {
                    return Err(Error::param("pigeonhole h must be at least 1"));
                }
            }
            if let Some(sigma) = flow.find_scale {
                check_unit_half("find_scale", sigma)?;
            }
            if let Some(sweep) = &flow.contrast_sweep {
                if sweep.is_empty() || sweep.iter().any(|t| !(t.is_finite() && *t >= 1.0)) {
                    return Err(Error::param("contrast_sweep needs contrasts ≥ 1"));
                }
            }
            if let Some(d) = &flow.diagnostics {
                if flow.pigeonhole.is_none() {
                    return Err(Error::param("flow diagnostics need pigeonhole settings"));
                }
                let e = d.exponents;
                if !(e.s > 0.0 && e.s <= 1.0 && e.t > 0.0 && e.t <= 1.0 && e.s_prime >= 0.5 * e.s && e.s_prime <= e.s) {
                    return Err(Error::param("diagnostic exponents need s, t in (0, 1] and s' in [s/2, s]"));
                }
            }
        }
        if let Some(c) = &self.constants {
            if let Some(d) = &c.defect {
                if !(d.s > 0.0 && d.s < 0.5) {
                    return Err(Error::param(format!("defect s = {} must lie in (0, 1/2)", d.s)));
                }
                if let Some(r) = d.reference {
                    if !(r.is_finite() && r > 0.0) {
                        return Err(Error::param(format!("defect reference {r} must be positive")));
                    }
                }
            }
        }
        if let Some(b) = &self.besov {
            if !(b.s > 0.0 && b.s < 1.0) {
                return Err(Error::param(format!("besov s = {} must lie in (0, 1)", b.s)));
            }
            match b.p {
                Exponent::Finite(p) if p >= 1.0 => {}
                _ => return Err(Error::param("besov p must lie in [1, ∞)")),
            }
            if let Exponent::Finite(q) = b.q {
                if q < 1.0 {
                    return Err(Error::param("besov q must lie in [1, ∞]"));
                }
            }
        }
        Ok(())
    }

    pub fn cube(&self, c: &CubeConfig) -> Result<TriadicCube> {
        let cube = TriadicCube::new(self.dimension, c.level, &c.offset)?;
        if !TriadicCube::origin(self.dimension, self.level).contains(&cube) {
            return Err(Error::param(format!("cube {c:?} lies outside the ambient cube of level {}", self.level)));
        }
        Ok(cube)
    }

    pub fn require_samples(&self) -> Result<usize> {
        self.samples.ok_or_else(|| Error::param("config needs \"samples\""))
    }

    pub fn require_exponents(&self) -> Result<&ExponentConfig> {
        self.exponents.as_ref().ok_or_else(|| Error::param("config needs \"exponents\""))
    }

    pub fn flow_settings(&self) -> Result<FlowSettings> {
        Ok(FlowSettings {
            samples: self.require_samples()?,
            symmetrize: self.flow.as_ref().and_then(|f| f.symmetrize),
            solver: self.solver,
            budget: self.budget,
            moment_contrast: match &self.exponents {
                Some(e) => e.moment_contrast()?,
                None => None,
            },
        })
    }
}

fn check_unit_half(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 0.5 {
        Ok(())
    } else {
        Err(Error::param(format!("{name} = {v} must lie in (0, 1/2]")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"{
        "dimension": 2,
        "level": 2,
        "ensemble": {"type": "two_phase_iid", "p": 0.5, "sigma_hi": 10.0, "sigma_lo": 0.1},
        "seed": 42,
        "samples": 8,
        "exponents": {"s": 0.25, "t": 0.25, "q": "inf"},
        "flow": {"pigeonhole": {"delta": 0.5, "sigma": 0.5, "h": 1}, "find_scale": 0.5}
    }"#;

    #[test]
    fn round_trip() {
        let c = RunConfig::from_json(BASIC).unwrap();
        let again = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.solver, SolverSettings::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = BASIC.replacen("\"seed\": 42", "\"seed\": 42, \"colour\": 1", 1);
        assert!(matches!(RunConfig::from_json(&bad), Err(Error::Json(_))));
        let nested = BASIC.replacen("\"h\": 1", "\"h\": 1, \"k\": 2", 1);
        assert!(RunConfig::from_json(&nested).is_err());
    }

    #[test]
    fn physical_parameters_required() {
        let missing = BASIC.replacen("\"seed\": 42,", "", 1);
        assert!(RunConfig::from_json(&missing).is_err());
    }

    #[test]
    fn exponent_out_of_range() {
        let bad = BASIC.replacen("\"s\": 0.25", "\"s\": 1.5", 1);
        assert!(matches!(RunConfig::from_json(&bad), Err(Error::Parameter(_))));
    }
}
