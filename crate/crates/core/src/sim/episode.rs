//! Closed-loop episodes with online disturbance learning.
//!
//! Every control period the loop filters the performance control, draws the
//! wind, steps the physics and checks the measured disturbance against the
//! bounds the safe set was computed for. A violation contracts the safe set
//! and launches a background update (GP refit plus warm re-solves). The
//! update is adopted a fixed simulated latency after launch; the loop joins
//! the worker at that point, so wall-clock speed never changes the
//! trajectory.

use std::io::Write;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::control::Controller;
use super::scenario::{build_grid, GpSpec, Scenario, SubsystemSpec};
use super::wind::WindField;
use super::{step, SimError};
use crate::decomposition::{Decomposition, Subsystem};
use crate::disturbance::gp::{GpHyper, GpModel};
use crate::disturbance::{violation_check, IntervalField, Measurement};
use crate::dynamics::DynamicsModel;
use crate::grid::ScalarField;
use crate::safety::{FilterConfig, SafetyFilter};
use crate::solver::{solve, solve_coarse_to_fine, SolveConfig};

/// One logged control period.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRow {
    pub t: f64,
    pub state: Vec<f64>,
    pub reference: Vec<f64>,
    pub control: Vec<f64>,
    pub overridden: bool,
    /// Combined safety value at the state before the step.
    pub value: f64,
    pub lambda: f64,
    pub wind: Vec<f64>,
    pub measured: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    WindOnset { t: f64 },
    DisturbanceViolation { t: f64, subsystem: String, margin: f64 },
    Contraction { t: f64, lambda: f64 },
    Emergency { t: f64 },
    UpdateLaunched { t: f64, samples: usize },
    UpdateRejected { t: f64, reason: String },
    Adoption { t: f64, safe_nodes: Vec<usize> },
    SetExpansion { t: f64, before: usize, after: usize },
    ConstraintViolation { t: f64, state: Vec<f64> },
}

impl Event {
    pub fn t(&self) -> f64 {
        match self {
            Event::WindOnset { t }
            | Event::DisturbanceViolation { t, .. }
            | Event::Contraction { t, .. }
            | Event::Emergency { t }
            | Event::UpdateLaunched { t, .. }
            | Event::UpdateRejected { t, .. }
            | Event::Adoption { t, .. }
            | Event::SetExpansion { t, .. }
            | Event::ConstraintViolation { t, .. } => *t,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Event::WindOnset { .. } => "wind_onset",
            Event::DisturbanceViolation { .. } => "disturbance_violation",
            Event::Contraction { .. } => "contraction",
            Event::Emergency { .. } => "emergency",
            Event::UpdateLaunched { .. } => "update_launched",
            Event::UpdateRejected { .. } => "update_rejected",
            Event::Adoption { .. } => "adoption",
            Event::SetExpansion { .. } => "set_expansion",
            Event::ConstraintViolation { .. } => "constraint_violation",
        }
    }
}

/// Timing of one background update. Wall times live here and never in the
/// episode log, which stays byte-reproducible.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UpdateReport {
    pub launched_at: f64,
    pub samples: usize,
    pub gp_wall: Duration,
    pub solve_wall: Duration,
    pub total_wall: Duration,
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
    pub subsystem_wall: Vec<Duration>,
    /// Fitted hyperparameters, one per learned channel.
    pub hyper: Vec<GpHyper>,
}

/// Result of the initial solve of one subsystem.
#[derive(Clone, Debug)]
pub struct InitialSolve {
    pub name: String,
    pub value: ScalarField,
    pub dbounds: IntervalField,
    pub constraint: ScalarField,
    pub iterations: usize,
    pub coarse_iterations: Option<usize>,
    pub converged: bool,
    pub dt: f64,
    pub wall: Duration,
}

#[derive(Clone, Debug, Default)]
pub struct EpisodeLog {
    pub rows: Vec<EpisodeRow>,
    pub events: Vec<Event>,
    pub updates: Vec<UpdateReport>,
    /// Every measured disturbance, tagged with the state it was measured at.
    pub measurements: Vec<Measurement>,
    pub labels: Vec<String>,
    pub control_dim: usize,
    pub disturbance_dim: usize,
}

impl EpisodeLog {
    pub fn constraint_violations(&self) -> usize {
        self.count("constraint_violation")
    }

    pub fn count(&self, kind: &str) -> usize {
        self.events.iter().filter(|e| e.kind() == kind).count()
    }

    pub fn first(&self, kind: &str) -> Option<&Event> {
        self.events.iter().find(|e| e.kind() == kind)
    }

    pub fn overrides(&self) -> usize {
        self.rows.iter().filter(|r| r.overridden).count()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend(self.labels.iter().cloned());
        header.extend(self.labels.iter().map(|l| format!("ref_{l}")));
        header.extend((0..self.control_dim).map(|i| format!("u{i}")));
        header.extend(["overridden", "value", "lambda"].map(String::from));
        header.extend((0..self.disturbance_dim).map(|i| format!("wind{i}")));
        header.extend((0..self.disturbance_dim).map(|i| format!("measured{i}")));
        out.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![format!("{:.3}", r.t)];
            let num = |v: f64| format!("{v:e}");
            rec.extend(r.state.iter().map(|v| num(*v)));
            rec.extend(r.reference.iter().map(|v| num(*v)));
            rec.extend(r.control.iter().map(|v| num(*v)));
            rec.push(u8::from(r.overridden).to_string());
            rec.push(num(r.value));
            rec.push(num(r.lambda));
            rec.extend(r.wind.iter().map(|v| num(*v)));
            rec.extend(r.measured.iter().map(|v| num(*v)));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// One JSON object per line.
    pub fn write_events<W: Write>(&self, mut w: W) -> Result<(), SimError> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Prior GP bounds on `grid`, repeated for every disturbance channel.
pub fn prior_bounds(spec: &SubsystemSpec, gp: &GpSpec, grid: &crate::grid::Grid) -> Result<IntervalField, SimError> {
    let inputs = spec.gp_inputs()?;
    let prior = GpModel::prior(gp.prior_hyper(inputs.len()), inputs.len())?;
    let field = prior.bounds_on_grid(grid, &inputs, gp.k_sigma)?;
    Ok(IntervalField::stack(vec![field; spec.disturbance_indices.len()])?)
}

/// Solves every subsystem against the prior disturbance bounds, in parallel.
pub fn initial_solves(scenario: &Scenario) -> Result<Vec<InitialSolve>, SimError> {
    scenario.validate()?;
    scenario
        .subsystems
        .par_iter()
        .map(|spec| {
            let model = spec.model.build()?;
            let grid = build_grid(&spec.grid)?;
            let constraint = scenario.constraint.field(&grid, &spec.state_indices)?;
            let dbounds = prior_bounds(spec, &scenario.gp, &grid)?;
            let start = Instant::now();
            let (res, coarse_iterations) = match &spec.coarse {
                Some(n) => {
                    let c2f =
                        solve_coarse_to_fine(&constraint, model.as_ref(), &dbounds, &grid.with_resolution(n)?, None, &scenario.solver)?;
                    (c2f.fine, Some(c2f.coarse.iterations))
                }
                None => (solve(&constraint, &constraint, model.as_ref(), &dbounds, &scenario.solver)?, None),
            };
            if !res.converged {
                warn!("initial solve of {} stopped after {} iterations without converging", spec.name, res.iterations);
            }
            Ok(InitialSolve {
                name: spec.name.clone(),
                value: res.value,
                dbounds,
                constraint,
                iterations: res.iterations,
                coarse_iterations,
                converged: res.converged,
                dt: res.dt,
                wall: start.elapsed(),
            })
        })
        .collect()
}

struct UpdateJob {
    data: Vec<Measurement>,
    parts: Vec<(SubsystemSpec, Arc<dyn DynamicsModel>, ScalarField, ScalarField)>,
    gp: GpSpec,
    solver: SolveConfig,
    launched_at: f64,
}

struct UpdateOutcome {
    fields: Vec<(ScalarField, IntervalField, bool)>,
    dts: Vec<f64>,
    report: UpdateReport,
}

impl UpdateJob {
    fn run(self) -> Result<UpdateOutcome, SimError> {
        let start = Instant::now();
        let mut bounds = Vec::with_capacity(self.parts.len());
        let mut hyper = Vec::new();
        for (spec, _, c, _) in &self.parts {
            let inputs = spec.gp_inputs()?;
            let features = spec.feature_indices();
            let mut channels = Vec::with_capacity(spec.disturbance_indices.len());
            for &k in &spec.disturbance_indices {
                let gp = GpModel::fit_measurements(&self.data, &features, k, &self.gp.policy, self.gp.max_points)?;
                channels.push(gp.bounds_on_grid(c.grid(), &inputs, self.gp.k_sigma)?);
                hyper.push(gp.hyper().clone());
            }
            bounds.push(IntervalField::stack(channels)?);
        }
        let gp_wall = start.elapsed();
        let solve_start = Instant::now();
        let solved = self
            .parts
            .par_iter()
            .zip(bounds.par_iter())
            .map(|((_, model, c, warm), d)| solve(warm, c, model.as_ref(), d, &self.solver))
            .collect::<Result<Vec<_>, _>>()?;
        let solve_wall = solve_start.elapsed();
        let report = UpdateReport {
            launched_at: self.launched_at,
            samples: self.data.len(),
            gp_wall,
            solve_wall,
            total_wall: start.elapsed(),
            iterations: solved.iter().map(|r| r.iterations).collect(),
            converged: solved.iter().map(|r| r.converged).collect(),
            subsystem_wall: solved.iter().map(|r| r.wall_time).collect(),
            hyper,
        };
        let dts = solved.iter().map(|r| r.dt).collect();
        let fields = solved.into_iter().zip(bounds).map(|(r, d)| (r.value, d, r.converged)).collect();
        Ok(UpdateOutcome { fields, dts, report })
    }
}

struct Pending {
    handle: JoinHandle<Result<UpdateOutcome, SimError>>,
    adopt_at: f64,
}

/// Nodes of each subsystem inside the effective set `{V <= -lambda}`.
fn safe_nodes(dec: &Decomposition, lambda: f64) -> Vec<usize> {
    dec.subsystems().iter().map(|s| s.filter.value().count_at_or_below(-lambda)).collect()
}

pub fn run_episode(scenario: &Scenario) -> Result<EpisodeLog, SimError> {
    let initial = initial_solves(scenario)?;
    run_episode_with(scenario, initial)
}

/// Runs an episode from precomputed initial solves (see [`initial_solves`]).
pub fn run_episode_with(scenario: &Scenario, initial: Vec<InitialSolve>) -> Result<EpisodeLog, SimError> {
    let model = scenario.validate()?;
    if initial.len() != scenario.subsystems.len() {
        return Err(SimError::Config("one initial solve per subsystem is required".into()));
    }
    let timing = &scenario.timing;
    let substeps = timing.substeps()?;
    let period = timing.control_period;
    let n = model.state_dim();
    let filter_cfg = FilterConfig {
        control_period: if scenario.filter.control_period > 0.0 { scenario.filter.control_period } else { period },
        ..scenario.filter.clone()
    };
    let tol = scenario.solver.tol;

    let mut subsystems = Vec::with_capacity(initial.len());
    let mut constraints = Vec::with_capacity(initial.len());
    let mut models = Vec::with_capacity(initial.len());
    for (spec, init) in scenario.subsystems.iter().zip(initial) {
        let sub_model = spec.model.build()?;
        let cfg = FilterConfig { base_band: filter_cfg.base_band.max(tol * init.dt), ..filter_cfg.clone() };
        let filter = SafetyFilter::new(init.value, sub_model.clone(), init.dbounds, cfg)?;
        subsystems.push(Subsystem {
            name: spec.name.clone(),
            state_indices: spec.state_indices.clone(),
            control_indices: spec.control_indices.clone(),
            disturbance_indices: spec.disturbance_indices.clone(),
            filter,
        });
        constraints.push(init.constraint);
        models.push(sub_model);
    }
    let mut dec = Decomposition::new(n, model.control_dim(), model.disturbance_dim(), subsystems, filter_cfg.schedule.clone())?;

    let controller = Controller::new(&scenario.controller, model.as_ref(), &scenario.reference, period)?;
    let wind = WindField::new(scenario.wind.clone(), model.disturbance_dim(), n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);

    let mut log = EpisodeLog {
        labels: model.state_labels(),
        control_dim: model.control_dim(),
        disturbance_dim: model.disturbance_dim(),
        ..EpisodeLog::default()
    };
    let mut x = scenario.initial_state.clone();
    let mut data: Vec<Measurement> = Vec::new();
    let mut pending: Option<Pending> = None;
    let mut last_launch = 0.0;
    let mut onset_logged = false;
    let mut in_violation = false;

    for tick in 0..timing.ticks() {
        let t = tick as f64 * period;

        if pending.as_ref().is_some_and(|p| t >= p.adopt_at - 1e-9) {
            let p = pending.take().expect("pending update");
            let joined = p.handle.join().map_err(|_| SimError::Update("update worker panicked".into()))?;
            match joined {
                Ok(outcome) => {
                    log.updates.push(outcome.report);
                    let before = safe_nodes(&dec, dec.lambda());
                    match dec.adopt(outcome.fields) {
                        Ok(()) => {
                            for (i, dt) in outcome.dts.iter().enumerate() {
                                dec.set_base_band(i, filter_cfg.base_band.max(tol * dt))?;
                            }
                            let after = safe_nodes(&dec, 0.0);
                            let (b, a) = (before.iter().sum::<usize>(), after.iter().sum::<usize>());
                            info!("t = {t:.2}: adopted update, safe nodes {b} -> {a}");
                            log.events.push(Event::Adoption { t, safe_nodes: after });
                            if a > b {
                                log.events.push(Event::SetExpansion { t, before: b, after: a });
                            }
                        }
                        Err(e) => log.events.push(Event::UpdateRejected { t, reason: e.to_string() }),
                    }
                }
                Err(e) => log.events.push(Event::UpdateRejected { t, reason: e.to_string() }),
            }
        }

        let x_ref = scenario.reference.state(t, n);
        let u_perf = controller.control(&x, &x_ref);
        let decision = dec.combined_control(&x, &u_perf)?;
        let u = if scenario.filter_enabled { decision.control } else { u_perf };
        let overridden = scenario.filter_enabled && decision.overridden;

        if !onset_logged && scenario.wind.onset().is_some_and(|s| t >= s) {
            onset_logged = true;
            log.events.push(Event::WindOnset { t });
        }
        let d = wind.sample(&x, t, &mut rng);
        let out = step(model.as_ref(), &x, &u, &d, period, substeps)?;

        // the measurement belongs to the state the period started from
        let mut violated = Vec::new();
        for s in dec.subsystems() {
            let xs = s.project(&x);
            let ds: Vec<f64> = s.disturbance_indices.iter().map(|&k| out.measured[k]).collect();
            let check = violation_check(s.filter.dbounds(), &xs, &ds)?;
            if !check.inside {
                violated.push((s.name.clone(), check.margin));
            }
        }
        data.push(Measurement { t, x: x.clone(), d: out.measured.clone() });
        let lambda_before = dec.lambda();
        let any_violation = !violated.is_empty();
        if any_violation {
            if !in_violation {
                for (subsystem, margin) in violated {
                    log.events.push(Event::DisturbanceViolation { t, subsystem, margin });
                }
            }
            let was_emergency = dec.emergency();
            let c = dec.contract(std::slice::from_ref(&x))?;
            if c.lambda > lambda_before {
                log.events.push(Event::Contraction { t, lambda: c.lambda });
            }
            if dec.emergency() && !was_emergency {
                log.events.push(Event::Emergency { t });
            }
        }
        in_violation = any_violation;

        let due = any_violation || t - last_launch >= timing.refit_period - 1e-9;
        if scenario.learning && pending.is_none() && due && data.len() >= scenario.gp.min_samples {
            // the fit sees only the most recent window of measurements
            let parts = scenario
                .subsystems
                .iter()
                .zip(dec.subsystems())
                .zip(&constraints)
                .zip(&models)
                .map(|(((spec, s), c), m)| (spec.clone(), m.clone(), c.clone(), s.filter.value().clone()))
                .collect();
            let from = t - scenario.gp.window;
            let job = UpdateJob {
                data: data.iter().filter(|m| m.t >= from - 1e-9).cloned().collect(),
                parts,
                gp: scenario.gp.clone(),
                solver: scenario.solver.clone(),
                launched_at: t,
            };
            log.events.push(Event::UpdateLaunched { t, samples: job.data.len() });
            let handle = std::thread::Builder::new().name("hjsafe-update".into()).spawn(move || job.run())?;
            pending = Some(Pending { handle, adopt_at: t + timing.update_latency });
            last_launch = t;
        }

        log.rows.push(EpisodeRow {
            t,
            state: x.clone(),
            reference: x_ref,
            control: u,
            overridden,
            value: decision.value,
            lambda: dec.lambda(),
            wind: d,
            measured: out.measured,
        });
        x = out.state;
        if scenario.constraint.violated(&x) {
            log.events.push(Event::ConstraintViolation { t: t + period, state: x.clone() });
        }
    }
    if let Some(p) = pending {
        // finish the worker so no thread outlives the episode
        let _ = p.handle.join();
    }
    log.measurements = data;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::AxisSpec;

    fn small_demo() -> Scenario {
        let mut s = Scenario::quad2d_demo();
        s.subsystems[0].grid = vec![AxisSpec::new(0.0, 3.2, 41), AxisSpec::new(-6.0, 6.0, 41)];
        s.subsystems[0].coarse = None;
        s.timing.duration = 4.0;
        s
    }

    #[test]
    fn calm_episode_is_quiet() {
        let mut s = small_demo();
        s.wind = crate::sim::WindSpec::Calm;
        s.learning = false;
        let log = run_episode(&s).unwrap();
        assert_eq!(log.rows.len(), 400);
        assert_eq!(log.constraint_violations(), 0);
        assert_eq!(log.count("disturbance_violation"), 0);
    }

    #[test]
    fn event_log_is_jsonl() {
        let log = EpisodeLog {
            events: vec![Event::WindOnset { t: 1.0 }, Event::Contraction { t: 1.5, lambda: 0.05 }],
            ..EpisodeLog::default()
        };
        let mut buf = Vec::new();
        log.write_events(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "{\"event\":\"wind_onset\",\"t\":1.0}\n{\"event\":\"contraction\",\"t\":1.5,\"lambda\":0.05}\n");
    }

    #[test]
    fn csv_has_one_row_per_tick() {
        let mut s = small_demo();
        s.timing.duration = 0.5;
        let log = run_episode(&s).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 51);
        assert!(text.starts_with("t,"));
    }
}
