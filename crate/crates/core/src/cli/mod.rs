//! Command-line front end: `solve`, `update`, `simulate`, `bench`, `gpfit`.
//!
//! Every command reads one JSON config (`--config`), writes its outputs under
//! `--out` and prints a JSON report. Exit codes: 0 success, 1 a solve did
//! not converge or the episode left the constraint set, 2 invalid input,
//! 3 runtime failure.

mod commands;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::sim::Scenario;
use crate::Error;

pub use commands::{bench, gpfit, simulate, solve, update, BenchRow, Report, SubsystemReport};

#[derive(Debug, Parser)]
#[command(name = "hjsafe", version, about = "Online Hamilton-Jacobi safe sets with learned disturbance bounds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for the solver (results do not depend on it).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Cold solve of every subsystem against the prior disturbance bounds
    /// (coarse-to-fine where the scenario lists a coarse grid).
    Solve {
        /// Skip the coarse stage.
        #[arg(long)]
        cold: bool,
    },
    /// Warm-start update from previously saved value functions.
    Update,
    /// Closed-loop episode; writes the log, events and measurements.
    Simulate,
    /// Cold vs warm vs coarse+warm, for the initial solve and an update.
    Bench,
    /// Fits disturbance GPs to a measurement CSV and writes the bounds.
    Gpfit,
    /// Prints a built-in scenario as JSON.
    Preset {
        #[arg(value_parser = ["quad2d_demo", "near_hover_demo"])]
        name: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetRef {
    pub preset: String,
}

/// Either a built-in scenario by name or a full scenario document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioSource {
    Preset(PresetRef),
    Inline(Box<Scenario>),
}

impl ScenarioSource {
    pub fn resolve(&self) -> Result<Scenario, Error> {
        match self {
            ScenarioSource::Inline(s) => Ok((**s).clone()),
            ScenarioSource::Preset(p) => preset(&p.preset),
        }
    }
}

pub fn preset(name: &str) -> Result<Scenario, Error> {
    match name {
        "quad2d_demo" => Ok(Scenario::quad2d_demo()),
        "near_hover_demo" => Ok(Scenario::near_hover_demo()),
        other => Err(Error::Config(format!("unknown preset `{other}`"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateInputs {
    /// Directory holding `<subsystem>.hjvf` from a previous solve.
    pub previous: PathBuf,
    /// Directory holding `<subsystem>_lo<k>.hjvf` / `_hi<k>.hjvf` bounds
    /// (as written by `gpfit`); the prior bounds are used when absent.
    #[serde(default)]
    pub bounds: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpFitInputs {
    /// CSV with columns `t, x_0.., d_0..` (full state and disturbance).
    pub measurements: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchOptions {
    /// The update row re-solves with the prior bounds scaled by this factor.
    pub update_scale: f64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { update_scale: 4.0 / 3.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub scenario: ScenarioSource,
    /// Restricts solve/update/bench/gpfit to these subsystems.
    #[serde(default)]
    pub subsystems: Option<Vec<String>>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub update: Option<UpdateInputs>,
    #[serde(default)]
    pub gpfit: Option<GpFitInputs>,
    #[serde(default)]
    pub bench: BenchOptions,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self, Error> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// Config after applying command-line overrides, with the scenario expanded.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub scenario: Scenario,
    pub config: Config,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub hash: String,
}

impl Resolved {
    pub fn new(mut config: Config, seed: Option<u64>, threads: Option<usize>, out: Option<PathBuf>) -> Result<Self, Error> {
        let mut scenario = config.scenario.resolve()?;
        if let Some(seed) = seed.or(config.seed) {
            scenario.seed = seed;
        }
        if let Some(names) = &config.subsystems {
            for n in names {
                if !scenario.subsystems.iter().any(|s| &s.name == n) {
                    return Err(Error::Config(format!("unknown subsystem `{n}`")));
                }
            }
        }
        scenario.validate()?;
        let threads = threads.or(config.threads);
        if threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        let out = out.or_else(|| config.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
        config.seed = Some(scenario.seed);
        // threads and output location never change results, so they stay out of the hash
        let hashed = Config { scenario: ScenarioSource::Inline(Box::new(scenario.clone())), threads: None, out: None, ..config.clone() };
        let hash = hex::encode(Sha256::digest(serde_json::to_vec(&hashed)?));
        Ok(Self { scenario, config, out, threads, hash })
    }

    pub fn selected(&self) -> Vec<usize> {
        (0..self.scenario.subsystems.len())
            .filter(|&i| {
                self.config.subsystems.as_ref().is_none_or(|names| names.contains(&self.scenario.subsystems[i].name))
            })
            .collect()
    }
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_UNSAFE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_FAILURE: i32 = 3;

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    use crate::sim::SimError;
    match err {
        Error::Config(_) | Error::Json(_) | Error::Sim(SimError::Config(_)) => EXIT_INVALID,
        _ => EXIT_FAILURE,
    }
}

/// Runs one command and returns its exit code; the report goes to stdout.
pub fn run(cli: &Cli) -> Result<i32, Error> {
    if let Command::Preset { name } = &cli.command {
        println!("{}", serde_json::to_string_pretty(&preset(name)?)?);
        return Ok(EXIT_OK);
    }
    let path = cli.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let resolved = Resolved::new(Config::load(path)?, cli.seed, cli.threads, cli.out.clone())?;
    if let Some(n) = resolved.threads {
        // an already initialised pool (e.g. in tests) keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    fs::create_dir_all(&resolved.out)?;
    let report = match cli.command {
        Command::Solve { cold } => solve(&resolved, cold)?,
        Command::Update => update(&resolved)?,
        Command::Simulate => simulate(&resolved)?,
        Command::Bench => bench(&resolved)?,
        Command::Gpfit => gpfit(&resolved)?,
        Command::Preset { .. } => unreachable!("handled above"),
    };
    let text = serde_json::to_string_pretty(&report)?;
    fs::write(resolved.out.join(format!("{}_report.json", report.command)), &text)?;
    println!("{text}");
    Ok(if report.ok { EXIT_OK } else { EXIT_UNSAFE })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_config_parses() {
        let c = Config::from_json(r#"{"scenario": {"preset": "quad2d_demo"}, "seed": 3}"#).unwrap();
        let r = Resolved::new(c, None, Some(2), None).unwrap();
        assert_eq!(r.scenario.seed, 3);
        assert_eq!(r.out, PathBuf::from("out"));
        assert_eq!(r.selected(), vec![0]);
    }

    #[test]
    fn unknown_keys_and_presets_are_rejected() {
        assert!(Config::from_json(r#"{"scenario": {"preset": "quad2d_demo"}, "bogus": 1}"#).is_err());
        let c = Config::from_json(r#"{"scenario": {"preset": "nope"}}"#).unwrap();
        let err = Resolved::new(c, None, None, None).unwrap_err();
        assert_eq!(exit_code(&err), EXIT_INVALID);
    }

    #[test]
    fn hash_ignores_threads_but_not_seed() {
        let c = || Config::from_json(r#"{"scenario": {"preset": "quad2d_demo"}}"#).unwrap();
        let a = Resolved::new(c(), None, Some(1), None).unwrap();
        let b = Resolved::new(c(), None, Some(4), Some("elsewhere".into())).unwrap();
        let s = Resolved::new(c(), Some(99), Some(1), None).unwrap();
        assert_eq!(a.hash, b.hash);
        assert_ne!(a.hash, s.hash);
        assert_eq!(a.hash.len(), 64);
    }

    #[test]
    fn inline_scenario_round_trips() {
        let text = serde_json::to_string(&Config {
            scenario: ScenarioSource::Inline(Box::new(Scenario::quad2d_demo())),
            subsystems: Some(vec!["quad2d".into()]),
            seed: None,
            threads: None,
            out: None,
            update: None,
            gpfit: None,
            bench: BenchOptions::default(),
        })
        .unwrap();
        let c = Config::from_json(&text).unwrap();
        assert_eq!(c.scenario.resolve().unwrap(), Scenario::quad2d_demo());
        let mut bad = c.clone();
        bad.subsystems = Some(vec!["z".into()]);
        assert!(Resolved::new(bad, None, None, None).is_err());
    }
}
