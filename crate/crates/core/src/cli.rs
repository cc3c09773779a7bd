//! Batch front end shared by the `cgflow` binary and the tests.
//!
//! Exit codes: 0 success, 1 a verify check failed, 2 configuration or I/O
//! error, 3 solver or statistical error, 4 solve budget exceeded. Errors are
//! printed to stderr as one JSON object; stdout only carries a JSON list of
//! the files written.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::coarse::coarse_pair;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::flow::{
    contraction_diagnostics, homogenization_scale_of, pigeonhole_select, run_flow, HomogenizationScale,
};
use crate::grid::{CoefficientField, EnsembleSpec};
use crate::multiscale::{besov_positive, besov_ring, MultiscaleLadder};
use crate::solver::BlockSolver;
use crate::spd::SpdMatrix;
use crate::verify::run_verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_BUDGET: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "cgflow", version, about = "Coarse-grained matrices and their flow across scales")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; defaults to all cores. Use 1 for bit-stable runs.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Coarse-grained pairs a(□), a_*(□) for the configured cubes.
    CoarseGrain {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Annealed flow of ā, ā_*⁻¹ and Θ over scales 0..=level.
    Flow {
        #[command(flatten)]
        common: CommonArgs,
        /// Scale selection with parameters δ σ h.
        #[arg(long, num_args = 3, value_names = ["DELTA", "SIGMA", "H"])]
        pigeonhole: Option<Vec<f64>>,
        /// Smallest scale with Θ ≤ 1 + σ.
        #[arg(long, value_name = "SIGMA")]
        find_scale: Option<f64>,
    },
    /// Multiscale ladder with the coarse-grained ellipticity constants.
    Constants {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Triadic seminorms of the field and of gradients and fluxes of harmonic functions.
    Besov {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Seeded invariant suite.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        /// Overrides the configured case count.
        #[arg(long)]
        cases: Option<usize>,
        /// Perturbs a(□) before the ordering check.
        #[arg(long)]
        inject_fault: bool,
    },
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::CoarseGrain { common }
            | Command::Flow { common, .. }
            | Command::Constants { common }
            | Command::Besov { common }
            | Command::Verify { common, .. } => common,
        }
    }
}

/// Failure of a subcommand, with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure { code: EXIT_CONFIG, kind: "config", message: message.into() }
    }

    pub fn to_json(&self) -> String {
        json!({ "error": self.kind, "exit_code": self.code, "message": self.message }).to_string()
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Parameter(_) | Error::Format(_) | Error::Json(_) => (EXIT_CONFIG, "config"),
            Error::Io(_) => (EXIT_CONFIG, "io"),
            Error::Capacity(_) => (EXIT_BUDGET, "budget"),
            Error::Convergence { .. }
            | Error::Consistency(_)
            | Error::Precondition(_)
            | Error::Reliability { .. }
            | Error::NoiseInconsistency { .. } => (EXIT_SOLVER, "solver"),
        };
        Failure { code, kind, message: e.to_string() }
    }
}

struct Outputs {
    dir: PathBuf,
    stem: String,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: &Path, config: &RunConfig, default_stem: &str) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let stem = config.output.stem.clone().unwrap_or_else(|| default_stem.to_string());
        Ok(Outputs { dir: dir.to_path_buf(), stem, written: Vec::new() })
    }

    fn write(&mut self, suffix: &str, contents: &str) -> Result<PathBuf> {
        let path = self.dir.join(format!("{}{suffix}", self.stem));
        fs::write(&path, contents)?;
        self.written.push(path.clone());
        Ok(path)
    }

    fn write_json(&mut self, suffix: &str, value: &impl Serialize) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(suffix, &text)
    }
}

fn load_config(common: &CommonArgs) -> std::result::Result<RunConfig, Failure> {
    let text = fs::read_to_string(&common.config)
        .map_err(|e| Failure::config(format!("cannot read {}: {e}", common.config.display())))?;
    let mut config = RunConfig::from_json(&text).map_err(|e| Failure::config(format!("schema violation: {e}")))?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

pub fn cmd_coarse_grain(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let field = CoefficientField::generate(&config.ensemble_spec(), config.dimension, config.level)?;
    let cubes = match &config.coarse_grain {
        Some(cg) => cg.cubes.iter().map(|c| config.cube(c)).collect::<Result<Vec<_>>>()?,
        None => vec![field.ambient()],
    };
    config.budget.check(cubes.len() as u64, "coarse-grain")?;
    let pairs = cubes.iter().map(|c| coarse_pair(&field, c, &config.solver)).collect::<Result<Vec<_>>>()?;
    let mut outputs = Outputs::new(out, config, "coarse_grain")?;
    outputs.write_json(".json", &json!({ "pairs": pairs }))?;
    Ok(outputs.written)
}

#[derive(Serialize)]
struct SweepRow {
    theta: f64,
    scale: HomogenizationScale,
}

fn scale_cell(scale: &HomogenizationScale) -> (String, String) {
    match scale {
        HomogenizationScale::Reached { n, confident } => (n.to_string(), confident.to_string()),
        HomogenizationScale::NotReached => (String::new(), String::new()),
    }
}

pub fn cmd_flow(
    config: &RunConfig,
    out: &Path,
    pigeonhole: Option<(f64, f64, u32)>,
    find_scale: Option<f64>,
) -> Result<Vec<PathBuf>> {
    let settings = config.flow_settings()?;
    let options = config.flow.clone().unwrap_or_default();
    let pigeonhole = pigeonhole.or(options.pigeonhole.map(|p| (p.delta, p.sigma, p.h)));
    let find_scale = find_scale.or(options.find_scale);
    let mut outputs = Outputs::new(out, config, "flow")?;

    if let Some(sweep) = &options.contrast_sweep {
        let sigma = find_scale.ok_or_else(|| Error::param("a contrast sweep needs find_scale"))?;
        let mut rows = Vec::with_capacity(sweep.len());
        let mut summary = String::from("theta,n_hat,confident,log_theta_sq\n");
        for &theta in sweep {
            let spec = EnsembleSpec::two_phase_contrast(theta, config.seed);
            let record = run_flow(&spec, config.dimension, config.level, &settings)?;
            let scale = homogenization_scale_of(&record, sigma)?;
            outputs.write(&format!("_theta_{theta}.csv"), &record.to_csv())?;
            let (n, confident) = scale_cell(&scale);
            summary.push_str(&format!("{theta},{n},{confident},{}\n", theta.ln().powi(2)));
            rows.push(SweepRow { theta, scale });
        }
        outputs.write("_summary.csv", &summary)?;
        outputs.write_json("_summary.json", &json!({ "sigma": sigma, "rows": rows }))?;
        return Ok(outputs.written);
    }

    let spec = config.ensemble_spec();
    let record = run_flow(&spec, config.dimension, config.level, &settings)?;
    outputs.write(".csv", &record.to_csv())?;
    let mut report = serde_json::Map::new();
    report.insert("record".into(), serde_json::to_value(&record)?);
    if let Some((delta, sigma, h)) = pigeonhole {
        let result = pigeonhole_select(&record, delta, sigma, h)?;
        report.insert("pigeonhole".into(), serde_json::to_value(&result)?);
        if let Some(d) = &options.diagnostics {
            let diag = contraction_diagnostics(&record, &result, &d.exponents, d.samples, &settings)?;
            report.insert("contraction".into(), serde_json::to_value(&diag)?);
        }
    }
    if let Some(sigma) = find_scale {
        let scale = homogenization_scale_of(&record, sigma)?;
        report.insert("homogenization_scale".into(), json!({ "sigma": sigma, "result": scale }));
    }
    outputs.write_json(".json", &report)?;
    Ok(outputs.written)
}

pub fn cmd_constants(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let exponents = config.require_exponents()?.exponent_set()?;
    let field = CoefficientField::generate(&config.ensemble_spec(), config.dimension, config.level)?;
    let ladder = MultiscaleLadder::build(&field, &field.ambient(), &config.solver, config.budget)?;
    let constants = ladder.ellipticity_constants(&exponents)?;
    let mut report = json!({
        "exponents": exponents,
        "admissible": exponents.is_admissible(),
        "upper": constants.upper,
        "lower": constants.lower,
        "ladder": ladder,
    });
    if let Some(defect) = config.constants.and_then(|c| c.defect) {
        let top = ladder.top().a.trace() / config.dimension as f64;
        let reference = SpdMatrix::scalar(config.dimension, defect.reference.unwrap_or(top))?;
        let value = ladder.multiscale_defect(&reference, defect.s, defect.q)?;
        report["defect"] = json!({ "s": defect.s, "q": defect.q, "reference": reference.get(0, 0), "value": value });
    }
    let mut outputs = Outputs::new(out, config, "constants")?;
    outputs.write_json(".json", &report)?;
    Ok(outputs.written)
}

pub fn cmd_besov(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let options = config.besov.ok_or_else(|| Error::param("config needs \"besov\""))?;
    let d = config.dimension;
    let field = CoefficientField::generate(&config.ensemble_spec(), d, config.level)?;
    let cube = field.ambient();
    let m = cube.level();
    let traces: Vec<f64> = (0..field.cell_count()).map(|i| field.cell_mat(i).trace() / d as f64).collect();
    let field_seminorm = besov_positive(&traces, 1, d, m, options.s, options.p, options.q)?;

    let solver = BlockSolver::new(&field, &cube, config.solver)?;
    let mut e1 = vec![0.0; d];
    e1[0] = 1.0;
    let zero = vec![0.0; d];
    let mut functions = vec![("dirichlet_e1".to_string(), solver.combined(&e1, &zero)?), ("neumann_e1".to_string(), solver.combined(&zero, &e1)?)];
    for (i, h) in solver.harmonic_pool(options.harmonic_functions, config.seed)?.into_iter().enumerate() {
        functions.push((format!("harmonic_{i}"), h));
    }
    let mut rows = Vec::with_capacity(functions.len());
    for (name, sol) in &functions {
        let grads = solver.cell_gradients(&sol.nodal);
        let fluxes = solver.cell_fluxes(&sol.nodal);
        rows.push(json!({
            "function": name,
            "energy": sol.energy,
            "gradient_ring": besov_ring(&grads, d, d, m, options.s, options.p, options.q)?,
            "flux_ring": besov_ring(&fluxes, d, d, m, options.s, options.p, options.q)?,
            "gradient_positive": besov_positive(&grads, d, d, m, options.s, options.p, options.q)?,
        }));
    }
    let mut outputs = Outputs::new(out, config, "besov")?;
    outputs.write_json(
        ".json",
        &json!({ "s": options.s, "p": options.p, "q": options.q, "field_positive": field_seminorm, "functions": rows }),
    )?;
    Ok(outputs.written)
}

/// Runs the suite; `Ok(false)` when a check failed.
pub fn cmd_verify(config: &RunConfig, out: &Path, cases: Option<usize>, inject_fault: bool) -> Result<(bool, Vec<PathBuf>)> {
    let mut settings = config.verify.clone().unwrap_or_default();
    if let Some(cases) = cases {
        settings.cases = cases;
    }
    settings.inject_fault |= inject_fault;
    let report = run_verify(&settings, config.seed)?;
    let mut outputs = Outputs::new(out, config, "verify")?;
    outputs.write_json(".json", &report)?;
    if let Some(name) = &report.first_failure {
        eprintln!("{}", json!({ "error": "verify", "exit_code": EXIT_VERIFY_FAILED, "check": name }));
    }
    Ok((report.passed(), outputs.written))
}

fn dispatch(command: &Command, config: &RunConfig) -> std::result::Result<Vec<PathBuf>, Failure> {
    let out = &command.common().out;
    Ok(match command {
        Command::CoarseGrain { .. } => cmd_coarse_grain(config, out)?,
        Command::Flow { pigeonhole, find_scale, .. } => {
            let pigeonhole = match pigeonhole.as_deref() {
                Some([delta, sigma, h]) => {
                    if h.fract() != 0.0 || *h < 1.0 {
                        return Err(Failure::config(format!("pigeonhole h = {h} must be a positive integer")));
                    }
                    Some((*delta, *sigma, *h as u32))
                }
                _ => None,
            };
            cmd_flow(config, out, pigeonhole, *find_scale)?
        }
        Command::Constants { .. } => cmd_constants(config, out)?,
        Command::Besov { .. } => cmd_besov(config, out)?,
        Command::Verify { cases, inject_fault, .. } => {
            let (passed, written) = cmd_verify(config, out, *cases, *inject_fault)?;
            if !passed {
                return Err(Failure { code: EXIT_VERIFY_FAILED, kind: "verify", message: String::new() });
            }
            written
        }
    })
}

/// Executes a parsed command and returns the process exit code.
pub fn execute(cli: &Cli) -> i32 {
    let common = cli.command.common();
    let result = load_config(common).and_then(|config| {
        let mut pool = rayon::ThreadPoolBuilder::new();
        if let Some(n) = common.threads {
            if n == 0 {
                return Err(Failure::config("--threads must be at least 1"));
            }
            pool = pool.num_threads(n);
        }
        let pool = pool.build().map_err(|e| Failure::config(format!("thread pool: {e}")))?;
        pool.install(|| dispatch(&cli.command, &config))
    });
    match result {
        Ok(written) => {
            println!("{}", json!({ "written": written }));
            EXIT_OK
        }
        Err(f) => {
            // verify failures already reported the failing check
            if f.kind != "verify" {
                eprintln!("{}", f.to_json());
            }
            f.code
        }
    }
}

/// Parses `args` (including the program name) and runs.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(&cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("config.json");
        fs::write(&path, body).unwrap();
        path
    }

    fn args(sub: &str, config: &Path, out: &Path) -> Vec<String> {
        vec![
            "cgflow".into(),
            sub.into(),
            "--config".into(),
            config.display().to_string(),
            "--out".into(),
            out.display().to_string(),
            "--threads".into(),
            "1".into(),
        ]
    }

    #[test]
    fn coarse_grain_harmonic_mean() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(
            dir.path(),
            r#"{"dimension": 1, "level": 1, "ensemble": {"type": "explicit", "cells": [1, 2, 4]}, "seed": 0}"#,
        );
        assert_eq!(run(args("coarse-grain", &config, dir.path())), EXIT_OK);
        let text = fs::read_to_string(dir.path().join("coarse_grain.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let a = v["pairs"][0]["a"][0].as_f64().unwrap();
        assert!((a - 12.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn malformed_config_exits_2() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(
            dir.path(),
            r#"{"dimension": 1, "level": 1, "ensemble": {"type": "constant", "value": 1}, "seed": 0,
                "exponents": {"s": 1.5, "t": 0.25, "q": 2}}"#,
        );
        assert_eq!(run(args("constants", &config, dir.path())), EXIT_CONFIG);
    }

    #[test]
    fn budget_exits_4() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(
            dir.path(),
            r#"{"dimension": 2, "level": 2, "ensemble": {"type": "constant", "value": 1}, "seed": 0,
                "exponents": {"s": 0.25, "t": 0.25, "q": 2}, "budget": 3}"#,
        );
        assert_eq!(run(args("constants", &config, dir.path())), EXIT_BUDGET);
    }

    #[test]
    fn verify_fault_exits_1() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(
            dir.path(),
            r#"{"dimension": 1, "level": 1, "ensemble": {"type": "constant", "value": 1}, "seed": 3,
                "verify": {"cases": 2, "max_level": 2}}"#,
        );
        let mut a = args("verify", &config, dir.path());
        assert_eq!(run(a.clone()), EXIT_OK);
        a.push("--inject-fault".into());
        assert_eq!(run(a), EXIT_VERIFY_FAILED);
        let report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
        assert_eq!(report["first_failure"], "ordering");
    }
}
