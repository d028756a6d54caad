//! Online Hamilton-Jacobi safe sets with learned disturbance bounds.
//!
//! Grids and fields ([`grid`]), control-affine models ([`dynamics`]), a
//! value-iteration solver for the infinite-horizon safety game ([`solver`]),
//! Gaussian-process disturbance bounds ([`disturbance`]), the
//! least-restrictive filter ([`safety`]), decomposition into self-contained
//! subsystems ([`decomposition`]), a deterministic simulator ([`sim`]) and the
//! command-line front end ([`cli`]).

pub mod cli;
pub mod decomposition;
pub mod disturbance;
pub mod dynamics;
pub mod grid;
pub mod hjvf;
pub mod levelset;
pub mod safety;
pub mod sim;
pub mod solver;

use thiserror::Error;

/// Any error raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Grid(#[from] grid::GridError),
    #[error(transparent)]
    LevelSet(#[from] levelset::LevelSetError),
    #[error(transparent)]
    Dynamics(#[from] dynamics::DynamicsError),
    #[error(transparent)]
    Solver(#[from] solver::SolverError),
    #[error(transparent)]
    Format(#[from] hjvf::FormatError),
    #[error(transparent)]
    Gp(#[from] disturbance::GpError),
    #[error(transparent)]
    Disturbance(#[from] disturbance::DisturbanceError),
    #[error(transparent)]
    Safety(#[from] safety::SafetyError),
    #[error(transparent)]
    Decomposition(#[from] decomposition::DecompositionError),
    #[error(transparent)]
    Sim(#[from] sim::SimError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
