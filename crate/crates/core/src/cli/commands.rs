//! The individual commands; each returns a [`Report`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::Serialize;

use super::Resolved;
use crate::disturbance::gp::{GpHyper, GpModel};
use crate::disturbance::{read_measurements, write_measurements, IntervalField};
use crate::grid::{Grid, ScalarField};
use crate::hjvf;
use crate::sim::{build_grid, initial_solves, prior_bounds, run_episode_with, SubsystemSpec};
use crate::solver::{solve as run_solve, solve_coarse_to_fine, write_residuals, SolveResult};
use crate::Error;

#[derive(Clone, Debug, Serialize)]
pub struct SubsystemReport {
    pub name: String,
    pub grid: Vec<usize>,
    pub nodes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coarse_grid: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coarse_iterations: Option<usize>,
    pub iterations: usize,
    pub converged: bool,
    pub final_residual: f64,
    pub dt: f64,
    pub wall_seconds: f64,
    /// Nodes with `V <= 0`.
    pub safe_nodes: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub subsystem: String,
    pub method: String,
    pub initial_iterations: usize,
    pub initial_seconds: f64,
    pub update_iterations: usize,
    pub update_seconds: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct UpdateSummary {
    pub launched_at: f64,
    pub samples: usize,
    pub gp_seconds: f64,
    pub solve_seconds: f64,
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EpisodeSummary {
    pub ticks: usize,
    pub constraint_violations: usize,
    pub overrides: usize,
    pub events: BTreeMap<String, usize>,
    pub updates: Vec<UpdateSummary>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ChannelFit {
    pub subsystem: String,
    pub channel: usize,
    pub training_points: usize,
    pub log_marginal_likelihood: f64,
    pub hyper: GpHyper,
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub command: &'static str,
    pub scenario: String,
    pub config_hash: String,
    pub seed: u64,
    pub ok: bool,
    pub subsystems: Vec<SubsystemReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bench: Option<Vec<BenchRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub episode: Option<EpisodeSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gp: Option<Vec<ChannelFit>>,
    pub outputs: Vec<PathBuf>,
    pub wall_seconds: f64,
}

impl Report {
    fn new(command: &'static str, r: &Resolved) -> Self {
        Self {
            command,
            scenario: r.scenario.name.clone(),
            config_hash: r.hash.clone(),
            seed: r.scenario.seed,
            ok: true,
            subsystems: Vec::new(),
            bench: None,
            episode: None,
            gp: None,
            outputs: Vec::new(),
            wall_seconds: 0.0,
        }
    }
}

fn subsystem_report(spec: &SubsystemSpec, res: &SolveResult, coarse: Option<&SolveResult>, wall: f64) -> SubsystemReport {
    SubsystemReport {
        name: spec.name.clone(),
        grid: res.value.grid().shape(),
        nodes: res.value.grid().len(),
        coarse_grid: coarse.map(|c| c.value.grid().shape()),
        coarse_iterations: coarse.map(|c| c.iterations),
        iterations: res.iterations,
        converged: res.converged,
        final_residual: res.final_residual(),
        dt: res.dt,
        wall_seconds: wall,
        safe_nodes: res.value.count_at_or_below(0.0),
    }
}

fn save_value(out: &Path, name: &str, res: &SolveResult, report: &mut Report) -> Result<(), Error> {
    let path = out.join(format!("{name}.hjvf"));
    hjvf::save(&path, &res.value)?;
    let residuals = out.join(format!("{name}_residuals.csv"));
    write_residuals(BufWriter::new(File::create(&residuals)?), &res.residuals)?;
    report.outputs.push(path);
    report.outputs.push(residuals);
    Ok(())
}

/// Per-subsystem inputs shared by every command.
struct Setup<'a> {
    spec: &'a SubsystemSpec,
    model: std::sync::Arc<dyn crate::dynamics::DynamicsModel>,
    grid: Grid,
    constraint: ScalarField,
    prior: IntervalField,
}

fn setup<'a>(r: &'a Resolved, i: usize) -> Result<Setup<'a>, Error> {
    let spec = &r.scenario.subsystems[i];
    let grid = build_grid(&spec.grid)?;
    let constraint = r.scenario.constraint.field(&grid, &spec.state_indices)?;
    let prior = prior_bounds(spec, &r.scenario.gp, &grid)?;
    Ok(Setup { spec, model: spec.model.build()?, grid, constraint, prior })
}

fn scaled(d: &IntervalField, s: f64) -> Result<IntervalField, Error> {
    let channels = (0..d.channels())
        .map(|k| {
            let lo = ScalarField::new(d.grid().clone(), d.lo_field(k).values().iter().map(|v| v * s).collect())?;
            let hi = ScalarField::new(d.grid().clone(), d.hi_field(k).values().iter().map(|v| v * s).collect())?;
            Ok((lo, hi))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(IntervalField::new(channels)?)
}

/// Cold (or coarse-to-fine) solve against the prior bounds.
pub fn solve(r: &Resolved, cold: bool) -> Result<Report, Error> {
    let start = Instant::now();
    let mut report = Report::new("solve", r);
    for i in r.selected() {
        let s = setup(r, i)?;
        let t0 = Instant::now();
        let (res, coarse) = match (&s.spec.coarse, cold) {
            (Some(n), false) => {
                let c2f = solve_coarse_to_fine(&s.constraint, s.model.as_ref(), &s.prior, &s.grid.with_resolution(n)?, None, &r.scenario.solver)?;
                (c2f.fine, Some(c2f.coarse))
            }
            _ => (run_solve(&s.constraint, &s.constraint, s.model.as_ref(), &s.prior, &r.scenario.solver)?, None),
        };
        let sub = subsystem_report(s.spec, &res, coarse.as_ref(), t0.elapsed().as_secs_f64());
        info!("{}: {} iterations, converged = {}", sub.name, sub.iterations, sub.converged);
        report.ok &= sub.converged;
        save_value(&r.out, &s.spec.name, &res, &mut report)?;
        report.outputs.extend(s.prior.save(&r.out, &format!("{}_prior", s.spec.name))?);
        report.subsystems.push(sub);
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

fn load_bounds(dir: &Path, name: &str, channels: usize, grid: &Grid) -> Result<IntervalField, Error> {
    let pairs: Vec<(PathBuf, PathBuf)> = (0..channels)
        .map(|k| (dir.join(format!("{name}_lo{k}.hjvf")), dir.join(format!("{name}_hi{k}.hjvf"))))
        .collect();
    let d = IntervalField::load(&pairs)?;
    Ok(if d.grid() == grid { d } else { d.resample(grid)? })
}

/// Warm-started re-solve from saved value functions.
pub fn update(r: &Resolved) -> Result<Report, Error> {
    let start = Instant::now();
    let inputs = r.config.update.as_ref().ok_or_else(|| Error::Config("`update` section is required".into()))?;
    let mut report = Report::new("update", r);
    for i in r.selected() {
        let s = setup(r, i)?;
        let prev = hjvf::load(inputs.previous.join(format!("{}.hjvf", s.spec.name)))?;
        let warm = if prev.grid() == &s.grid { prev } else { prev.resample(&s.grid)? };
        let d = match &inputs.bounds {
            Some(dir) => load_bounds(dir, &s.spec.name, s.spec.disturbance_indices.len(), &s.grid)?,
            None => s.prior.clone(),
        };
        let t0 = Instant::now();
        let res = run_solve(&warm, &s.constraint, s.model.as_ref(), &d, &r.scenario.solver)?;
        let sub = subsystem_report(s.spec, &res, None, t0.elapsed().as_secs_f64());
        report.ok &= sub.converged;
        save_value(&r.out, &s.spec.name, &res, &mut report)?;
        report.subsystems.push(sub);
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Closed-loop episode.
pub fn simulate(r: &Resolved) -> Result<Report, Error> {
    let start = Instant::now();
    let mut report = Report::new("simulate", r);
    let initial = initial_solves(&r.scenario)?;
    for (spec, init) in r.scenario.subsystems.iter().zip(&initial) {
        report.ok &= init.converged;
        report.subsystems.push(SubsystemReport {
            name: init.name.clone(),
            grid: init.value.grid().shape(),
            nodes: init.value.grid().len(),
            coarse_grid: spec.coarse.clone(),
            coarse_iterations: init.coarse_iterations,
            iterations: init.iterations,
            converged: init.converged,
            final_residual: f64::NAN,
            dt: init.dt,
            wall_seconds: init.wall.as_secs_f64(),
            safe_nodes: init.value.count_at_or_below(0.0),
        });
    }
    let log = run_episode_with(&r.scenario, initial)?;
    let paths = [
        r.out.join("episode.csv"),
        r.out.join("events.jsonl"),
        r.out.join("measurements.csv"),
    ];
    log.write_csv(BufWriter::new(File::create(&paths[0])?))?;
    log.write_events(BufWriter::new(File::create(&paths[1])?))?;
    write_measurements(BufWriter::new(File::create(&paths[2])?), &log.measurements)?;
    report.outputs.extend(paths);
    let mut events = BTreeMap::new();
    for e in &log.events {
        *events.entry(e.kind().to_string()).or_insert(0) += 1;
    }
    let updates: Vec<UpdateSummary> = log
        .updates
        .iter()
        .map(|u| UpdateSummary {
            launched_at: u.launched_at,
            samples: u.samples,
            gp_seconds: u.gp_wall.as_secs_f64(),
            solve_seconds: u.solve_wall.as_secs_f64(),
            iterations: u.iterations.clone(),
            converged: u.converged.clone(),
        })
        .collect();
    let violations = log.constraint_violations();
    report.ok &= violations == 0 && updates.iter().all(|u| u.converged.iter().all(|&c| c));
    report.episode = Some(EpisodeSummary {
        ticks: log.rows.len(),
        constraint_violations: violations,
        overrides: log.overrides(),
        events,
        updates,
    });
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Cold vs warm vs coarse+warm for the initial solve and for an update
/// that widens the prior bounds by `bench.update_scale`.
pub fn bench(r: &Resolved) -> Result<Report, Error> {
    let start = Instant::now();
    let mut report = Report::new("bench", r);
    let scale = r.config.bench.update_scale;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Config(format!("bench.update_scale must be positive, got {scale}")));
    }
    let cfg = &r.scenario.solver;
    let mut rows = Vec::new();
    for i in r.selected() {
        let s = setup(r, i)?;
        let model = s.model.as_ref();
        let updated = scaled(&s.prior, scale)?;
        let name = &s.spec.name;

        let cold0 = run_solve(&s.constraint, &s.constraint, model, &s.prior, cfg)?;
        let cold1 = run_solve(&s.constraint, &s.constraint, model, &updated, cfg)?;
        let warm1 = run_solve(&cold0.value, &s.constraint, model, &updated, cfg)?;
        let secs = |r: &SolveResult| r.wall_time.as_secs_f64();
        let row = |method: &str, a: &SolveResult, b: &SolveResult, a_extra: (usize, f64)| BenchRow {
            subsystem: name.clone(),
            method: method.into(),
            initial_iterations: a.iterations + a_extra.0,
            initial_seconds: secs(a) + a_extra.1,
            update_iterations: b.iterations,
            update_seconds: secs(b),
            converged: a.converged && b.converged,
        };
        rows.push(row("cold", &cold0, &cold1, (0, 0.0)));
        rows.push(row("warm", &cold0, &warm1, (0, 0.0)));
        if let Some(n) = &s.spec.coarse {
            let c2f = solve_coarse_to_fine(&s.constraint, model, &s.prior, &s.grid.with_resolution(n)?, None, cfg)?;
            let upd = run_solve(&c2f.fine.value, &s.constraint, model, &updated, cfg)?;
            // the coarse stage counts towards the initial cost
            rows.push(row("coarse+warm", &c2f.fine, &upd, (c2f.coarse.iterations, secs(&c2f.coarse))));
            report.subsystems.push(subsystem_report(s.spec, &c2f.fine, Some(&c2f.coarse), c2f.wall_time().as_secs_f64()));
        } else {
            report.subsystems.push(subsystem_report(s.spec, &cold0, None, secs(&cold0)));
        }
    }
    report.ok = rows.iter().all(|r| r.converged);
    let table = bench_table(&rows);
    eprint!("{table}");
    let path = r.out.join("bench_table.txt");
    fs::write(&path, &table)?;
    report.outputs.push(path);
    report.bench = Some(rows);
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Fixed-width text table of benchmark rows.
pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "{:<12} {:<12} {:>10} {:>10} {:>10} {:>10}", "subsystem", "method", "init_it", "init_s", "update_it", "update_s");
    for r in rows {
        let _ = writeln!(
            t,
            "{:<12} {:<12} {:>10} {:>10.3} {:>10} {:>10.3}",
            r.subsystem, r.method, r.initial_iterations, r.initial_seconds, r.update_iterations, r.update_seconds
        );
    }
    t
}

/// Fits one GP per disturbance channel and writes the bounds on each grid.
pub fn gpfit(r: &Resolved) -> Result<Report, Error> {
    let start = Instant::now();
    let inputs = r.config.gpfit.as_ref().ok_or_else(|| Error::Config("`gpfit` section is required".into()))?;
    let data = read_measurements(File::open(&inputs.measurements)?)?;
    let model = r.scenario.model.build()?;
    if let Some(m) = data.iter().find(|m| m.x.len() != model.state_dim() || m.d.len() != model.disturbance_dim()) {
        return Err(Error::Config(format!(
            "measurement at t = {} has {} states and {} disturbances, the model has {} and {}",
            m.t,
            m.x.len(),
            m.d.len(),
            model.state_dim(),
            model.disturbance_dim()
        )));
    }
    let gp = &r.scenario.gp;
    let mut report = Report::new("gpfit", r);
    let mut fits = Vec::new();
    for i in r.selected() {
        let spec = &r.scenario.subsystems[i];
        let grid = build_grid(&spec.grid)?;
        let gp_inputs = spec.gp_inputs()?;
        let features = spec.feature_indices();
        let mut channels = Vec::new();
        for &k in &spec.disturbance_indices {
            let model = GpModel::fit_measurements(&data, &features, k, &gp.policy, gp.max_points)?;
            channels.push(model.bounds_on_grid(&grid, &gp_inputs, gp.k_sigma)?);
            fits.push(ChannelFit {
                subsystem: spec.name.clone(),
                channel: k,
                training_points: model.training_len(),
                log_marginal_likelihood: model.log_marginal_likelihood(),
                hyper: model.hyper().clone(),
            });
        }
        report.outputs.extend(IntervalField::stack(channels)?.save(&r.out, &spec.name)?);
    }
    report.gp = Some(fits);
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}
