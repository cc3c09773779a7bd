//! Coarse-grained diffusion matrices of lattice coefficient fields.
//!
//! Fields are cell-constant on triadic cubes and discretized with
//! multilinear elements. On each cube the Dirichlet and Neumann block
//! problems give the pair `a(□) ≥ a_*(□)`, which the [`multiscale`] layer
//! aggregates across subcubes and the [`flow`] layer averages over random
//! ensembles scale by scale.

pub mod cli;
pub mod coarse;
pub mod config;
pub mod error;
pub mod flow;
pub mod grid;
pub mod multiscale;
pub mod solver;
pub mod spd;
pub mod verify;

pub use coarse::{coarse_pair, j_by_maximizer, j_functional, BlockAnalysis, CoarseGrainedPair};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use flow::{
    estimate_annealed, homogenization_scale, pigeonhole_scalars, pigeonhole_select, run_flow, FlowRecord,
    FlowSettings, PigeonholeOutcome,
};
pub use grid::{AxisMap, CoefficientField, EnsembleKind, EnsembleSpec, TriadicCube};
pub use multiscale::{Exponent, ExponentSet, MultiscaleLadder, SolveBudget};
pub use solver::{BlockSolver, SolverSettings};
pub use spd::{Mat, SpdMatrix};
