//! Fixed-point solver for the infinite-horizon avoid variational inequality
//!
//! `0 = max(c(x) - V(x), D_t V(x) + min_u max_d <grad V(x), f(x, u, d)>)`
//!
//! iterated in backward time with a first-order Lax-Friedrichs scheme and
//! forward Euler steps.

use std::io::Write;
use std::time::{Duration, Instant};

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::disturbance::IntervalField;
use crate::dynamics::{maximizing_disturbance, minimizing_control, AffineTerms, DynamicsError, DynamicsModel, Interval};
use crate::grid::{one_sided, Grid, GridError, ScalarField};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("time step {dt} exceeds the CFL limit {limit}")]
    Cfl { dt: f64, limit: f64 },
    #[error("flow bounds are zero everywhere; no time step can be derived")]
    DegenerateFlow,
    #[error("non-finite flow bound at node {0}")]
    NonFiniteFlow(usize),
    #[error("model has {model} dimensions, grid has {grid}")]
    DimensionMismatch { model: usize, grid: usize },
    #[error("disturbance field has {got} channels, model expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("residual {residual} at iteration {iteration} grew more than tenfold from its minimum {minimum}")]
    Diverged { iteration: usize, residual: f64, minimum: f64 },
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("grids do not cover the same extent")]
    ExtentMismatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dissipation {
    /// Per-node flow bounds.
    #[default]
    Local,
    /// Per-axis maximum of the flow bounds over the whole grid.
    Global,
    /// Exact per-axis upwinding (Godunov flux) instead of added dissipation.
    /// Needs a Hamiltonian that splits into one term per state dimension,
    /// i.e. every input channel drives a single state derivative.
    Upwind,
    /// Godunov flux on second-order ENO one-sided differences. Far less
    /// numerical diffusion than the first-order modes; same requirements as
    /// `Upwind`.
    Eno2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveConfig {
    pub cfl_factor: f64,
    /// Convergence threshold on `max |dV| / dt`.
    pub tol: f64,
    pub max_iters: usize,
    pub dissipation: Dissipation,
    /// Clip V at `max c` during [`solve`].
    pub cap_at_max_constraint: bool,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self { cfl_factor: 0.8, tol: 1e-3, max_iters: 20_000, dissipation: Dissipation::Local, cap_at_max_constraint: true }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.cfl_factor > 0.0 && self.cfl_factor <= 1.0) {
            return Err(SolverError::Config(format!("cfl_factor must lie in (0, 1], got {}", self.cfl_factor)));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(SolverError::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(SolverError::Config("max_iters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualSample {
    pub iter: usize,
    pub residual: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub value: ScalarField,
    pub iterations: usize,
    pub wall_time: Duration,
    pub converged: bool,
    pub residuals: Vec<ResidualSample>,
    pub dt: f64,
}

impl SolveResult {
    pub fn final_residual(&self) -> f64 {
        self.residuals.last().map_or(f64::INFINITY, |r| r.residual)
    }
}

/// Both stages of a coarse-to-fine solve.
#[derive(Clone, Debug)]
pub struct CoarseToFine {
    pub coarse: SolveResult,
    pub fine: SolveResult,
}

impl CoarseToFine {
    pub fn wall_time(&self) -> Duration {
        self.coarse.wall_time + self.fine.wall_time
    }
}

const CHUNK: usize = 2048;

/// Everything about one solve that stays fixed across iterations.
struct Problem<'a> {
    grid: &'a Grid,
    model: &'a dyn DynamicsModel,
    c: &'a [f64],
    /// Upper clip. Above `max c` the field only records how far outside the
    /// grid trajectories would go, which never settles and says nothing
    /// about the safe set.
    cap: f64,
    dbounds: &'a IntervalField,
    /// Nonzero gain entries as `(state row, input column)`, union over nodes.
    control_pattern: Vec<(usize, usize)>,
    disturbance_pattern: Vec<(usize, usize)>,
    /// Per node: drift, then control and disturbance gains in pattern order.
    coeffs: Vec<f64>,
    stride: usize,
    /// Dissipation coefficients, `ndims` per node (or a single row in global mode).
    alpha: Vec<f64>,
    global: bool,
    /// Upwind mode: per node and dimension, the slopes of the Hamiltonian
    /// term for positive and negative costate.
    slopes: Option<Vec<f64>>,
    eno: bool,
    /// Value assigned outside the grid by the Godunov modes.
    ghost: f64,
    max_rate: f64,
}

impl<'a> Problem<'a> {
    fn new(
        c: &'a ScalarField,
        model: &'a dyn DynamicsModel,
        dbounds: &'a IntervalField,
        dissipation: Dissipation,
    ) -> Result<Self, SolverError> {
        let grid = c.grid();
        let d = grid.ndims();
        if model.state_dim() != d {
            return Err(SolverError::DimensionMismatch { model: model.state_dim(), grid: d });
        }
        if dbounds.channels() != model.disturbance_dim() {
            return Err(SolverError::ChannelMismatch { expected: model.disturbance_dim(), got: dbounds.channels() });
        }
        if dbounds.grid() != grid {
            return Err(GridError::GridMismatch.into());
        }
        // surfaces NotAffine before the parallel sweep
        AffineTerms::for_model(model).evaluate(model, &grid.flat_coords(0))?;

        let m = model.control_dim();
        let q = model.disturbance_dim();
        let dense = d * (1 + m + q);
        let mut terms_all = vec![0.0; grid.len() * dense];
        let mut alpha = vec![0.0; grid.len() * d];
        terms_all.par_chunks_mut(CHUNK * dense).zip(alpha.par_chunks_mut(CHUNK * d)).enumerate().for_each(
            |(chunk, (terms_out, out))| {
                let start = chunk * CHUNK;
                let mut idx = grid.unravel(start);
                let mut x = vec![0.0; d];
                let mut terms = AffineTerms::for_model(model);
                let mut dist = vec![Interval::new(0.0, 0.0); dbounds.channels()];
                for (k, (a, t)) in out.chunks_mut(d).zip(terms_out.chunks_mut(dense)).enumerate() {
                    grid.coords_into(&idx, &mut x);
                    dbounds.at_node(start + k, &mut dist);
                    terms.evaluate(model, &x).expect("checked above");
                    terms.flow_bounds_into(model.control_bounds(), &dist, a);
                    t[..d].copy_from_slice(&terms.drift);
                    t[d..d * (1 + m)].copy_from_slice(&terms.control_gain);
                    t[d * (1 + m)..].copy_from_slice(&terms.disturbance_gain);
                    grid.advance(&mut idx);
                }
            },
        );
        // column-major gains: entry (i, j) at j * d + i
        let pattern = |offset: usize, cols: usize| -> Vec<(usize, usize)> {
            let mut used = vec![false; d * cols];
            for t in terms_all.chunks(dense) {
                for (u, g) in used.iter_mut().zip(&t[offset..offset + d * cols]) {
                    *u |= *g != 0.0;
                }
            }
            (0..d * cols).filter(|&e| used[e]).map(|e| (e % d, e / d)).collect()
        };
        let control_pattern = pattern(d, m);
        let disturbance_pattern = pattern(d * (1 + m), q);
        let stride = d + control_pattern.len() + disturbance_pattern.len();
        let mut coeffs = Vec::with_capacity(grid.len() * stride);
        for t in terms_all.chunks(dense) {
            coeffs.extend_from_slice(&t[..d]);
            coeffs.extend(control_pattern.iter().map(|&(i, j)| t[d + j * d + i]));
            coeffs.extend(disturbance_pattern.iter().map(|&(i, k)| t[d * (1 + m) + k * d + i]));
        }
        drop(terms_all);
        if let Some(i) = alpha.iter().position(|a| !a.is_finite()) {
            return Err(SolverError::NonFiniteFlow(i / d));
        }
        let spacing = grid.spacing();
        let rate_at = |a: &[f64]| a.iter().zip(spacing).map(|(a, dx)| a / dx).sum::<f64>();
        let (alpha, max_rate) = match dissipation {
            Dissipation::Local | Dissipation::Upwind | Dissipation::Eno2 => {
                let max_rate = alpha.chunks(d).map(rate_at).fold(0.0, f64::max);
                (alpha, max_rate)
            }
            Dissipation::Global => {
                let mut row = vec![0.0f64; d];
                for a in alpha.chunks(d) {
                    for (r, v) in row.iter_mut().zip(a) {
                        *r = r.max(*v);
                    }
                }
                let max_rate = rate_at(&row);
                (row, max_rate)
            }
        };
        if max_rate <= 0.0 {
            return Err(SolverError::DegenerateFlow);
        }
        let slopes = if matches!(dissipation, Dissipation::Upwind | Dissipation::Eno2) {
            let single_row = |pattern: &[(usize, usize)], cols: usize| {
                (0..cols).all(|j| pattern.iter().filter(|e| e.1 == j).count() <= 1)
            };
            if !single_row(&control_pattern, m) || !single_row(&disturbance_pattern, q) {
                return Err(SolverError::Config("upwind scheme needs every input to drive a single state".into()));
            }
            let controls = model.control_bounds();
            let mut slopes = vec![0.0; grid.len() * 2 * d];
            let mut dist = vec![Interval::new(0.0, 0.0); q];
            for (flat, (out, t)) in slopes.chunks_mut(2 * d).zip(coeffs.chunks(stride)).enumerate() {
                dbounds.at_node(flat, &mut dist);
                for i in 0..d {
                    out[2 * i] = t[i];
                    out[2 * i + 1] = t[i];
                }
                let mut e = d;
                for &(i, j) in &control_pattern {
                    let (a, b) = (t[e] * controls[j].lo, t[e] * controls[j].hi);
                    out[2 * i] += a.min(b);
                    out[2 * i + 1] += a.max(b);
                    e += 1;
                }
                for &(i, k) in &disturbance_pattern {
                    let (a, b) = (t[e] * dist[k].lo, t[e] * dist[k].hi);
                    out[2 * i] += a.max(b);
                    out[2 * i + 1] += a.min(b);
                    e += 1;
                }
            }
            Some(slopes)
        } else {
            None
        };
        Ok(Self {
            grid,
            model,
            c: c.values(),
            cap: f64::INFINITY,
            dbounds,
            control_pattern,
            disturbance_pattern,
            coeffs,
            stride,
            alpha,
            global: dissipation == Dissipation::Global,
            eno: dissipation == Dissipation::Eno2,
            ghost: c.max_value(),
            slopes,
            max_rate,
        })
    }

    fn dt(&self, cfl_factor: f64) -> f64 {
        cfl_factor / self.max_rate
    }

    /// `min_u max_d <p, f>` at node `flat` from the cached terms.
    #[inline]
    fn hamiltonian(&self, flat: usize, p: &[f64], s_u: &mut [f64], s_d: &mut [f64], dist: &[Interval]) -> f64 {
        let d = p.len();
        let t = &self.coeffs[flat * self.stride..(flat + 1) * self.stride];
        let mut h = 0.0;
        for i in 0..d {
            h += p[i] * t[i];
        }
        s_u.fill(0.0);
        s_d.fill(0.0);
        let mut e = d;
        for &(i, j) in &self.control_pattern {
            s_u[j] += p[i] * t[e];
            e += 1;
        }
        for &(i, k) in &self.disturbance_pattern {
            s_d[k] += p[i] * t[e];
            e += 1;
        }
        for (s, b) in s_u.iter().zip(self.model.control_bounds()) {
            h += s * minimizing_control(*s, b);
        }
        for (s, b) in s_d.iter().zip(dist) {
            h += s * maximizing_disturbance(*s, b);
        }
        h
    }

    /// One backward-time Euler step from `v` into `out`; returns `max |out - v|`.
    fn step(&self, v: &[f64], out: &mut [f64], dt: f64) -> f64 {
        let grid = self.grid;
        let d = grid.ndims();
        let strides = grid.strides();
        let spacing = grid.spacing();
        let sizes = grid.shape();
        let inv: Vec<f64> = spacing.iter().map(|dx| 1.0 / dx).collect();
        out.par_chunks_mut(CHUNK)
            .enumerate()
            .map(|(chunk, out)| {
                let start = chunk * CHUNK;
                let mut idx = grid.unravel(start);
                let mut p = vec![0.0; d];
                let mut s_u = vec![0.0; self.model.control_dim()];
                let mut s_d = vec![0.0; self.dbounds.channels()];
                let mut dist = vec![Interval::new(0.0, 0.0); self.dbounds.channels()];
                let mut change: f64 = 0.0;
                for (k, o) in out.iter_mut().enumerate() {
                    let flat = start + k;
                    if let Some(slopes) = &self.slopes {
                        let sl = &slopes[flat * 2 * d..(flat + 1) * 2 * d];
                        let vc = v[flat];
                        let mut h = 0.0;
                        for i in 0..d {
                            let (k, st) = (idx[i], strides[i]);
                            let n = sizes[i];
                            // beyond the grid counts as outside the constraint set
                            let ghost = self.ghost.max(vc);
                            let (dm, dp) = if k == 0 {
                                ((vc - ghost) * inv[i], (v[flat + st] - vc) * inv[i])
                            } else if k + 1 == n {
                                ((vc - v[flat - st]) * inv[i], (ghost - vc) * inv[i])
                            } else {
                                let (vm, vp) = (v[flat - st], v[flat + st]);
                                let (mut dm, mut dp) = ((vc - vm) * inv[i], (vp - vc) * inv[i]);
                                if self.eno {
                                    let mid = (vp - 2.0 * vc + vm) * inv[i];
                                    if k >= 2 {
                                        dm += 0.5 * minmod((vc - 2.0 * vm + v[flat - 2 * st]) * inv[i], mid);
                                    }
                                    if k + 2 < n {
                                        dp -= 0.5 * minmod(mid, (v[flat + 2 * st] - 2.0 * vp + vc) * inv[i]);
                                    }
                                }
                                (dm, dp)
                            };
                            h += godunov(dm, dp, sl[2 * i], sl[2 * i + 1]);
                        }
                        let next = (vc + dt * h).max(self.c[flat]).min(self.cap);
                        change = change.max((next - vc).abs());
                        *o = next;
                        grid.advance(&mut idx);
                        continue;
                    }
                    let alpha = if self.global { &self.alpha[..] } else { &self.alpha[flat * d..(flat + 1) * d] };
                    let mut diss = 0.0;
                    for i in 0..d {
                        let (dm, dp) = one_sided(v, flat, idx[i], sizes[i], strides[i], spacing[i]);
                        p[i] = 0.5 * (dm + dp);
                        diss += alpha[i] * 0.5 * (dp - dm);
                    }
                    self.dbounds.at_node(flat, &mut dist);
                    let h = self.hamiltonian(flat, &p, &mut s_u, &mut s_d, &dist) + diss;
                    let next = (v[flat] + dt * h).max(self.c[flat]).min(self.cap);
                    change = change.max((next - v[flat]).abs());
                    *o = next;
                    grid.advance(&mut idx);
                }
                change
            })
            .reduce(|| 0.0, f64::max)
    }
}

/// Godunov flux of the one-dimensional term `p * (p >= 0 ? up : down)` for
/// the backward-time update: the largest value over `[dm, dp]` when the
/// one-sided differences open upward, the smallest otherwise.
#[inline]
fn minmod(a: f64, b: f64) -> f64 {
    if a * b <= 0.0 {
        0.0
    } else if a.abs() < b.abs() {
        a
    } else {
        b
    }
}

fn godunov(dm: f64, dp: f64, up: f64, down: f64) -> f64 {
    let term = |p: f64| p * if p >= 0.0 { up } else { down };
    let (a, b) = (term(dm), term(dp));
    if dm <= dp {
        let m = a.max(b);
        if dm <= 0.0 && dp >= 0.0 {
            m.max(0.0)
        } else {
            m
        }
    } else {
        let m = a.min(b);
        if dp <= 0.0 && dm >= 0.0 {
            m.min(0.0)
        } else {
            m
        }
    }
}

/// Largest stable step: `cfl_factor / max_x sum_i alpha_i(x) / dx_i`.
pub fn cfl_dt(
    grid: &Grid,
    model: &dyn DynamicsModel,
    dbounds: &IntervalField,
    cfl_factor: f64,
    dissipation: Dissipation,
) -> Result<f64, SolverError> {
    let c = ScalarField::constant(grid.clone(), 0.0);
    Ok(Problem::new(&c, model, dbounds, dissipation)?.dt(cfl_factor))
}

/// A single explicit step of the scheme with per-node dissipation.
pub fn vi_step(
    v: &ScalarField,
    c: &ScalarField,
    model: &dyn DynamicsModel,
    dbounds: &IntervalField,
    dt: f64,
) -> Result<ScalarField, SolverError> {
    if v.grid() != c.grid() {
        return Err(GridError::GridMismatch.into());
    }
    let problem = Problem::new(c, model, dbounds, Dissipation::Local)?;
    let limit = problem.dt(1.0);
    if !(dt > 0.0 && dt <= limit * (1.0 + 1e-12)) {
        return Err(SolverError::Cfl { dt, limit });
    }
    let mut out = vec![0.0; v.grid().len()];
    problem.step(v.values(), &mut out, dt);
    Ok(ScalarField::from_parts(v.grid().clone(), out))
}

/// Iterates from `init` until `max |dV| / dt < tol`.
///
/// A cold solve starts from `init = c`; a warm start passes a previously
/// converged value function.
pub fn solve(
    init: &ScalarField,
    c: &ScalarField,
    model: &dyn DynamicsModel,
    dbounds: &IntervalField,
    cfg: &SolveConfig,
) -> Result<SolveResult, SolverError> {
    cfg.validate()?;
    if init.grid() != c.grid() {
        return Err(GridError::GridMismatch.into());
    }
    let start = Instant::now();
    let mut problem = Problem::new(c, model, dbounds, cfg.dissipation)?;
    if cfg.cap_at_max_constraint {
        problem.cap = c.max_value();
    }
    let cap = problem.cap;
    let dt = problem.dt(cfg.cfl_factor);
    let mut v: Vec<f64> = init.values().iter().zip(c.values()).map(|(a, b)| a.max(*b).min(cap)).collect();
    let mut next = vec![0.0; v.len()];
    let mut residuals = Vec::new();
    let mut minimum = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    debug!("solve: {} nodes, dt = {dt:.3e}", v.len());
    while iterations < cfg.max_iters {
        let residual = problem.step(&v, &mut next, dt) / dt;
        std::mem::swap(&mut v, &mut next);
        iterations += 1;
        residuals.push(ResidualSample { iter: iterations, residual, wall_ms: start.elapsed().as_secs_f64() * 1e3 });
        if !residual.is_finite() || residual > 10.0 * minimum.max(cfg.tol) {
            return Err(SolverError::Diverged { iteration: iterations, residual, minimum });
        }
        minimum = minimum.min(residual);
        if residual < cfg.tol {
            converged = true;
            break;
        }
    }
    let wall_time = start.elapsed();
    info!(
        "solve: {} nodes, {iterations} iterations, converged = {converged}, {:.3} s",
        v.len(),
        wall_time.as_secs_f64()
    );
    Ok(SolveResult { value: ScalarField::from_parts(c.grid().clone(), v), iterations, wall_time, converged, residuals, dt })
}

/// Solves on `coarse_grid`, resamples the result onto the grid of `c_fine`
/// and refines it there. `coarse_init` warm-starts the coarse stage (the
/// coarse constraint is used when it is `None`).
pub fn solve_coarse_to_fine(
    c_fine: &ScalarField,
    model: &dyn DynamicsModel,
    dbounds: &IntervalField,
    coarse_grid: &Grid,
    coarse_init: Option<&ScalarField>,
    cfg: &SolveConfig,
) -> Result<CoarseToFine, SolverError> {
    let fine_grid = c_fine.grid();
    if !fine_grid.same_extent(coarse_grid) {
        return Err(SolverError::ExtentMismatch);
    }
    let c_coarse = c_fine.resample(coarse_grid)?;
    let d_coarse = dbounds.resample(coarse_grid)?;
    let init = coarse_init.unwrap_or(&c_coarse);
    let coarse = solve(init, &c_coarse, model, &d_coarse, cfg)?;
    let start = Instant::now();
    let seed = coarse.value.resample(fine_grid)?;
    let mut fine = solve(&seed, c_fine, model, dbounds, cfg)?;
    fine.wall_time = start.elapsed();
    Ok(CoarseToFine { coarse, fine })
}

/// Writes `iter,residual,wall_ms` rows.
pub fn write_residuals<W: Write>(mut w: W, residuals: &[ResidualSample]) -> Result<(), SolverError> {
    writeln!(w, "iter,residual,wall_ms")?;
    for r in residuals {
        writeln!(w, "{},{:e},{:.3}", r.iter, r.residual, r.wall_ms)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{DoubleIntegrator, Quad2DVert};
    use crate::grid::Axis;
    use crate::levelset::signed_distance_box;
    use approx::assert_relative_eq;

    /// `x' = rate`, no inputs.
    #[derive(Debug)]
    struct Drift1D {
        rate: f64,
    }

    impl DynamicsModel for Drift1D {
        fn name(&self) -> &str {
            "drift"
        }
        fn state_dim(&self) -> usize {
            1
        }
        fn control_bounds(&self) -> &[Interval] {
            &[]
        }
        fn disturbance_dim(&self) -> usize {
            0
        }
        fn flow_into(&self, _x: &[f64], _u: &[f64], _d: &[f64], out: &mut [f64]) {
            out[0] = self.rate;
        }
        fn affine_terms(&self, _x: &[f64], out: &mut crate::dynamics::AffineView<'_>) -> Result<(), DynamicsError> {
            out.set_drift(0, self.rate);
            Ok(())
        }
    }

    fn quad_problem(n: usize, dbar: f64) -> (ScalarField, Quad2DVert, IntervalField) {
        let g = Grid::new(vec![Axis::new(0.0, 3.2, n), Axis::new(-6.0, 6.0, n)]).unwrap();
        let c = signed_distance_box(&g, &[0.35, f64::NEG_INFINITY], &[2.8, f64::INFINITY]).unwrap();
        let d = IntervalField::uniform(&g, &[Interval::symmetric(dbar)]);
        (c, Quad2DVert::default(), d)
    }

    #[test]
    fn linear_advection_step() {
        let g = Grid::new(vec![Axis::new(0.0, 1.0, 21)]).unwrap();
        let v = ScalarField::from_fn(g.clone(), |x| x[0]).unwrap();
        let c = ScalarField::constant(g.clone(), -10.0);
        let model = Drift1D { rate: 1.0 };
        let d = IntervalField::uniform(&g, &[]);
        let dt = cfl_dt(&g, &model, &d, 0.8, Dissipation::Local).unwrap();
        assert_relative_eq!(dt, 0.8 * 0.05);
        let next = vi_step(&v, &c, &model, &d, dt).unwrap();
        for (a, b) in next.values().iter().zip(v.values()) {
            assert_relative_eq!(a - b, dt, epsilon = 1e-12);
        }
    }

    #[test]
    fn constraint_is_a_fixed_point_when_flow_points_inward() {
        // c = x is increasing and the flow moves left: H <= 0 everywhere
        let g = Grid::new(vec![Axis::new(0.0, 1.0, 11)]).unwrap();
        let c = ScalarField::from_fn(g.clone(), |x| x[0]).unwrap();
        let model = Drift1D { rate: -1.0 };
        let d = IntervalField::uniform(&g, &[]);
        let dt = cfl_dt(&g, &model, &d, 0.8, Dissipation::Local).unwrap();
        assert_eq!(vi_step(&c, &c, &model, &d, dt).unwrap(), c);
    }

    #[test]
    fn clamp_applies_where_step_goes_below_constraint() {
        let g = Grid::new(vec![Axis::new(0.0, 1.0, 11)]).unwrap();
        let v = ScalarField::constant(g.clone(), -1.0);
        let c = ScalarField::from_fn(g.clone(), |x| x[0] - 0.5).unwrap();
        let model = Drift1D { rate: 1.0 };
        let d = IntervalField::uniform(&g, &[]);
        let next = vi_step(&v, &c, &model, &d, 0.05).unwrap();
        assert_eq!(next, c);
    }

    #[test]
    fn cfl_examples() {
        let g = Grid::new(vec![Axis::new(0.0, 1.0, 21)]).unwrap();
        let d = IntervalField::uniform(&g, &[]);
        let dt = cfl_dt(&g, &Drift1D { rate: 10.1 }, &d, 0.8, Dissipation::Local).unwrap();
        assert_relative_eq!(dt, 0.8 / (10.1 / 0.05), epsilon = 1e-15);
        assert_relative_eq!(dt, 3.96e-3, epsilon = 1e-5);
        let g2 = Grid::new(vec![Axis::new(0.0, 1.0, 41)]).unwrap();
        let d2 = IntervalField::uniform(&g2, &[]);
        let dt2 = cfl_dt(&g2, &Drift1D { rate: 10.1 }, &d2, 0.8, Dissipation::Local).unwrap();
        assert_relative_eq!(dt2, dt / 2.0, epsilon = 1e-15);

        // p' = v with |v| <= 2, v' = u with u in [-10.1, 10.1]
        let g = Grid::new(vec![Axis::new(-1.0, 1.0, 41), Axis::new(-2.0, 2.0, 4.0f64.div_euclid(0.07) as usize + 1)]).unwrap();
        let model = DoubleIntegrator::new(-10.1, 10.1);
        let d = IntervalField::uniform(&g, &[Interval::symmetric(0.0)]);
        let dt = cfl_dt(&g, &model, &d, 0.8, Dissipation::Local).unwrap();
        let (dx, dv) = (g.spacing()[0], g.spacing()[1]);
        assert_relative_eq!(dt, 0.8 / (2.0 / dx + 10.1 / dv), epsilon = 1e-12);
    }

    #[test]
    fn degenerate_flow_and_bad_step_rejected() {
        let g = Grid::new(vec![Axis::new(0.0, 1.0, 5)]).unwrap();
        let d = IntervalField::uniform(&g, &[]);
        assert!(matches!(cfl_dt(&g, &Drift1D { rate: 0.0 }, &d, 0.8, Dissipation::Local), Err(SolverError::DegenerateFlow)));
        let v = ScalarField::constant(g.clone(), 0.0);
        assert!(matches!(vi_step(&v, &v, &Drift1D { rate: 1.0 }, &d, 0.5), Err(SolverError::Cfl { .. })));
        let cfg = SolveConfig { cfl_factor: 1.5, ..SolveConfig::default() };
        assert!(matches!(solve(&v, &v, &Drift1D { rate: 1.0 }, &d, &cfg), Err(SolverError::Config(_))));
    }

    #[test]
    fn cold_solve_is_monotone_and_clamped() {
        let (c, model, d) = quad_problem(41, 0.3);
        let mut v = c.clone();
        let dt = cfl_dt(c.grid(), &model, &d, 0.8, Dissipation::Local).unwrap();
        for _ in 0..200 {
            let next = vi_step(&v, &c, &model, &d, dt).unwrap();
            for ((a, b), cc) in next.values().iter().zip(v.values()).zip(c.values()) {
                assert!(*a >= b - 1e-12);
                assert!(a >= cc);
            }
            v = next;
        }
    }

    #[test]
    fn quad_floor_boundary_matches_stopping_distance() {
        let (c, model, d) = quad_problem(81, 0.3);
        let res = solve(&c, &c, &model, &d, &SolveConfig::default()).unwrap();
        assert!(res.converged);
        assert!(res.final_residual() < 1e-3);
        let g = c.grid();
        let dx = g.spacing()[0];
        // along v = -3 the floor boundary sits at 0.35 + 9/19
        for k in 0..g.axis(0).n {
            let p = g.axis(0).coord(k);
            let value = res.value.interp(&[p, -3.0]).unwrap().value;
            let expected = 0.35 + 9.0 / 19.0;
            if p < expected - 2.0 * dx {
                assert!(value > 0.0, "p = {p}");
            }
            if p > expected + 2.0 * dx && p < 2.8 - 2.0 * dx {
                assert!(value <= 0.0, "p = {p}");
            }
        }
        for (v, cc) in res.value.values().iter().zip(c.values()) {
            assert!(v >= cc);
            if *v <= 0.0 {
                assert!(*cc <= 0.0);
            }
        }
    }

    #[test]
    fn warm_start_from_solution_is_immediate() {
        let (c, model, d) = quad_problem(41, 0.3);
        let cfg = SolveConfig::default();
        let cold = solve(&c, &c, &model, &d, &cfg).unwrap();
        let warm = solve(&cold.value, &c, &model, &d, &cfg).unwrap();
        assert!(warm.converged);
        assert!(warm.iterations <= 5);
        let diff = warm.value.values().iter().zip(cold.value.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= cfg.tol * warm.dt * warm.iterations as f64);
    }

    #[test]
    fn larger_disturbance_shrinks_safe_set() {
        let cfg = SolveConfig::default();
        let (c, model, d_small) = quad_problem(41, 0.3);
        let (_, _, d_large) = quad_problem(41, 1.0);
        let small = solve(&c, &c, &model, &d_small, &cfg).unwrap();
        let large = solve(&c, &c, &model, &d_large, &cfg).unwrap();
        for (a, b) in large.value.values().iter().zip(small.value.values()) {
            assert!(*a >= b - 1e-9);
            if *a <= 0.0 {
                assert!(*b <= 0.0);
            }
        }
        assert!(large.value.count_at_or_below(0.0) < small.value.count_at_or_below(0.0));
    }

    #[test]
    fn global_dissipation_is_more_conservative() {
        let (c, model, d) = quad_problem(41, 0.3);
        let local = solve(&c, &c, &model, &d, &SolveConfig::default()).unwrap();
        let cfg = SolveConfig { dissipation: Dissipation::Global, max_iters: 4000, ..SolveConfig::default() };
        let global = solve(&c, &c, &model, &d, &cfg).unwrap();
        let (mut both, mut only_global) = (0, 0);
        for (a, b) in local.value.values().iter().zip(global.value.values()) {
            if *b <= 0.0 {
                if *a <= 0.0 { both += 1 } else { only_global += 1 }
            }
        }
        assert_eq!(only_global, 0);
        assert!(both > 0);
    }

    #[test]
    fn coarse_to_fine_refines_coarse_solution() {
        let (c, model, d) = quad_problem(41, 0.3);
        let coarse = c.grid().with_resolution(&[21, 21]).unwrap();
        let cfg = SolveConfig::default();
        let res = solve_coarse_to_fine(&c, &model, &d, &coarse, None, &cfg).unwrap();
        assert!(res.coarse.converged && res.fine.converged);
        assert_eq!(res.fine.value.grid(), c.grid());
        let bad = Grid::new(vec![Axis::new(0.0, 3.0, 21), Axis::new(-6.0, 6.0, 21)]).unwrap();
        assert!(matches!(solve_coarse_to_fine(&c, &model, &d, &bad, None, &cfg), Err(SolverError::ExtentMismatch)));
    }

    #[test]
    fn residual_csv_layout() {
        let mut buf = Vec::new();
        write_residuals(&mut buf, &[ResidualSample { iter: 1, residual: 0.5, wall_ms: 1.25 }]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "iter,residual,wall_ms\n1,5e-1,1.250\n");
    }
}
