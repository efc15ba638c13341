//! Shrinking-horizon time-optimal model predictive control.
//!
//! Each step re-solves the minimum-time problem from the measured state,
//! applies the first optimized partition `[0, dt*)` to the plant, and
//! shrinks the horizon: `N_{n+1} = max(N_n - 1, N_min)`. On nominal runs
//! the optimal cost `t_f*` acts as a Lyapunov function that shrinks by
//! `dt*` per step until the interval clamp `dt* = dt_min` engages near the
//! target, which is the practical-stability regime. The report helpers
//! turn those properties into per-step diagnostics.

use std::fmt;
use std::io::{self, Write};
use std::time::Instant;

use crate::solver::{solve_warm, SolverConfig, SolverStatus};
use crate::systems::{
    propagate, ControlSignal, PropagationError, PropagatorConfig, SystemModel,
};
use crate::trajectory::{ControlSpline, Solution, TrajectoryError};
use crate::transcription::{
    assemble_nlp, layout_variables, CollocationForm, ControlParam, OcpSpec, TranscriptionError,
};

/// Closed-loop configuration; `param`, `form`, and the interval bounds
/// override whatever the problem template carries.
#[derive(Debug, Clone)]
pub struct MpcConfig {
    /// Initial horizon `N_0`.
    pub n0: usize,
    /// Horizon floor `N_min`.
    pub n_min: usize,
    /// Keep strictly positive in feedback; `dt* = dt_min` near the target
    /// is what bounds the practical-stability region.
    pub dt_min: f64,
    pub dt_max: f64,
    pub param: ControlParam,
    pub form: CollocationForm,
    /// Ball radius around the target (over its pinned components) that
    /// declares convergence.
    pub convergence_radius: f64,
    pub max_steps: usize,
    pub warm_start: bool,
    pub solver: SolverConfig,
    pub propagator: PropagatorConfig,
}

impl MpcConfig {
    pub fn new(n0: usize, n_min: usize) -> Self {
        MpcConfig {
            n0,
            n_min,
            dt_min: 1e-3,
            dt_max: f64::INFINITY,
            param: ControlParam::Constant,
            form: CollocationForm::Compressed,
            convergence_radius: 0.02,
            max_steps: 500,
            warm_start: true,
            solver: SolverConfig::default(),
            propagator: PropagatorConfig::default(),
        }
    }

    fn validate(&self) -> Result<(), MpcError> {
        if self.n_min < 1 || self.n_min > self.n0 {
            return Err(MpcError::InvalidConfig(format!(
                "need 1 <= N_min <= N_0, got N_min = {}, N_0 = {}",
                self.n_min, self.n0
            )));
        }
        if !(self.dt_min >= 0.0) || !(self.dt_max >= self.dt_min) {
            return Err(MpcError::InvalidConfig(
                "interval bounds must satisfy 0 <= dt_min <= dt_max".into(),
            ));
        }
        if !(self.convergence_radius > 0.0) {
            return Err(MpcError::InvalidConfig(
                "convergence radius must be positive".into(),
            ));
        }
        if self.max_steps < 1 {
            return Err(MpcError::InvalidConfig("max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum MpcError {
    InvalidConfig(String),
    /// Requested horizon is below the configured floor.
    HorizonBelowFloor { horizon: usize, n_min: usize },
    /// The step's NLP did not reach optimality.
    SolveFailed {
        horizon: usize,
        status: SolverStatus,
        violation: f64,
        kkt: f64,
    },
    Transcription(TranscriptionError),
    Trajectory(TrajectoryError),
    Propagation(PropagationError),
}

impl fmt::Display for MpcError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MpcError::InvalidConfig(msg) => write!(f, "invalid MPC configuration: {msg}"),
            MpcError::HorizonBelowFloor { horizon, n_min } => {
                write!(f, "horizon {horizon} is below the floor N_min = {n_min}")
            }
            MpcError::SolveFailed {
                horizon,
                status,
                violation,
                kkt,
            } => write!(
                f,
                "step solve failed at horizon {horizon}: status {status}, violation {violation:.3e}, kkt {kkt:.3e}"
            ),
            MpcError::Transcription(e) => write!(f, "{e}"),
            MpcError::Trajectory(e) => write!(f, "{e}"),
            MpcError::Propagation(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for MpcError {}

impl From<TranscriptionError> for MpcError {
    fn from(e: TranscriptionError) -> Self {
        MpcError::Transcription(e)
    }
}

impl From<TrajectoryError> for MpcError {
    fn from(e: TrajectoryError) -> Self {
        MpcError::Trajectory(e)
    }
}

impl From<PropagationError> for MpcError {
    fn from(e: PropagationError) -> Self {
        MpcError::Propagation(e)
    }
}

/// The first optimized partition of a solution, viewed as a control signal
/// on `[0, duration]`.
#[derive(Debug, Clone)]
pub struct ControlSegment {
    pub spline: ControlSpline,
    pub duration: f64,
}

impl ControlSignal for ControlSegment {
    fn eval(&self, t: f64) -> Vec<f64> {
        self.spline.eval_clamped(t.min(self.duration))
    }

    fn eval_left(&self, t: f64) -> Vec<f64> {
        self.spline.eval_left_clamped(t.min(self.duration))
    }

    fn breakpoints(&self, t_end: f64) -> Vec<f64> {
        self.spline.breakpoints(t_end.min(self.duration))
    }
}

fn step_spec(template: &OcpSpec, state: &[f64], horizon: usize, cfg: &MpcConfig) -> OcpSpec {
    let mut spec = template.clone();
    spec.x_start = state.to_vec();
    spec.n_partitions = horizon;
    spec.dt_min = cfg.dt_min;
    spec.dt_max = cfg.dt_max;
    spec.param = cfg.param;
    spec.form = cfg.form;
    spec
}

/// Grid-shift warm start: drop the first partition of the previous
/// solution and reuse the remainder. When the horizon did not shrink (it
/// already sits at the floor) the tail is padded by repeating the last
/// partition, which is exactly feasible whenever the previous plan ended
/// at a holdable target. `None` when the previous solution's shape does
/// not line up.
fn warm_start_vector(spec: &OcpSpec, prev: &Solution) -> Option<Vec<f64>> {
    if prev.spec.param != spec.param || prev.spec.form != spec.form {
        return None;
    }
    let n_new = spec.n_partitions;
    let n_prev = prev.spec.n_partitions;
    if !matches!(n_prev.checked_sub(n_new), Some(0) | Some(1)) {
        return None;
    }
    let lay_new = layout_variables(spec);
    let lay_prev = layout_variables(&prev.spec);
    let zp = &prev.solver.z;
    let p = spec.model.state_dim();
    let q = spec.model.control_dim();
    let mut z = vec![0.0; lay_new.n_z()];
    z[lay_new.dt()] = prev.dt_star;
    for k in 0..=n_new {
        let src = lay_prev.x_grid((k + 1).min(n_prev));
        let dst = lay_new.x_grid(k);
        z[dst..dst + p].copy_from_slice(&zp[src..src + p]);
    }
    for k in 0..n_new {
        if let (Some(dst), Some(src)) = (
            lay_new.x_mid(k),
            lay_prev.x_mid((k + 1).min(n_prev - 1)),
        ) {
            z[dst..dst + p].copy_from_slice(&zp[src..src + p]);
        }
    }
    let grid_cap = match spec.param {
        ControlParam::Constant => n_prev - 1,
        _ => n_prev,
    };
    let knot_top = match spec.param {
        ControlParam::Constant => n_new - 1,
        _ => n_new,
    };
    for k in 0..=knot_top {
        let src = lay_prev.u_grid((k + 1).min(grid_cap));
        let dst = lay_new.u_grid(k);
        z[dst..dst + q].copy_from_slice(&zp[src..src + q]);
    }
    if spec.param.has_midpoint_controls() {
        for k in 0..n_new {
            let src = lay_prev.u_mid((k + 1).min(n_prev - 1)).unwrap();
            let dst = lay_new.u_mid(k).unwrap();
            z[dst..dst + q].copy_from_slice(&zp[src..src + q]);
        }
    }
    for i in 0..p {
        z[lay_new.x_grid(0) + i] = spec.x_start[i];
    }
    Some(z)
}

/// Shifts the previous solution's constraint multipliers onto the new
/// grid, mirroring [`warm_start_vector`]'s block structure.
fn shift_multipliers(spec: &OcpSpec, prev: &Solution) -> Option<(Vec<f64>, Vec<f64>)> {
    if prev.spec.param != spec.param || prev.spec.form != spec.form {
        return None;
    }
    let n_new = spec.n_partitions;
    let n_prev = prev.spec.n_partitions;
    if !matches!(n_prev.checked_sub(n_new), Some(0) | Some(1)) {
        return None;
    }
    let p = spec.model.state_dim();
    let eq_block = match spec.form {
        CollocationForm::Compressed => p,
        CollocationForm::Uncompressed => 2 * p,
    };
    let n_fixed = spec.target.n_fixed();
    let lam_prev = &prev.solver.eq_multipliers;
    if lam_prev.len() != eq_block * n_prev + n_fixed {
        return None;
    }
    let mut lam = Vec::with_capacity(eq_block * n_new + n_fixed);
    for k in 0..n_new {
        let src = eq_block * (k + 1).min(n_prev - 1);
        lam.extend_from_slice(&lam_prev[src..src + eq_block]);
    }
    lam.extend_from_slice(&lam_prev[eq_block * n_prev..]);

    let n_path = spec.path_ineq.as_ref().map(|c| c.dim).unwrap_or(0);
    let mid_box = match spec.form {
        CollocationForm::Compressed => {
            spec.x_bounds.lower.iter().filter(|v| v.is_finite()).count()
                + spec.x_bounds.upper.iter().filter(|v| v.is_finite()).count()
        }
        CollocationForm::Uncompressed => 0,
    };
    let mid_block = mid_box + n_path;
    let mu_prev = &prev.solver.ineq_multipliers;
    if mu_prev.len() != mid_block * n_prev + n_path * n_prev {
        return None;
    }
    let mut mu = Vec::with_capacity(mid_block * n_new + n_path * n_new);
    for k in 0..n_new {
        let src = mid_block * (k + 1).min(n_prev - 1);
        mu.extend_from_slice(&mu_prev[src..src + mid_block]);
    }
    let grid_base = mid_block * n_prev;
    for k in 1..=n_new {
        let src = grid_base + n_path * ((k + 1).min(n_prev) - 1);
        mu.extend_from_slice(&mu_prev[src..src + n_path]);
    }
    Some((lam, mu))
}

/// Solves one horizon-`N` problem from `state` and returns the solution
/// together with its applied first segment.
pub fn mpc_step(
    state: &[f64],
    horizon: usize,
    template: &OcpSpec,
    cfg: &MpcConfig,
    prev: Option<&Solution>,
) -> Result<(Solution, ControlSegment), MpcError> {
    cfg.validate()?;
    if horizon < cfg.n_min {
        return Err(MpcError::HorizonBelowFloor {
            horizon,
            n_min: cfg.n_min,
        });
    }
    if !state.iter().all(|v| v.is_finite()) {
        return Err(MpcError::InvalidConfig("state must be finite".into()));
    }
    let spec = step_spec(template, state, horizon, cfg);

    // grid-shift warm start with carried multipliers; on any miss fall back
    // to the staged cold solve
    if cfg.warm_start {
        if let Some(p) = prev {
            let warm = warm_start_vector(&spec, p).zip(shift_multipliers(&spec, p));
            if let Some((z0, (lam0, mu0))) = warm {
                let nlp = assemble_nlp(&spec)?;
                let result = solve_warm(&nlp, &z0, &lam0, &mu0, &cfg.solver);
                if result.status == SolverStatus::Optimal {
                    let sol = Solution::from_decision(spec, result)?;
                    let segment = ControlSegment {
                        spline: sol.control.clone(),
                        duration: sol.dt_star,
                    };
                    return Ok((sol, segment));
                }
            }
        }
    }

    let sol = crate::solve_ocp(&spec, &cfg.solver)?;
    if sol.solver.status != SolverStatus::Optimal {
        return Err(MpcError::SolveFailed {
            horizon,
            status: sol.solver.status,
            violation: sol.solver.constraint_violation,
            kkt: sol.solver.kkt_residual,
        });
    }
    let segment = ControlSegment {
        spline: sol.control.clone(),
        duration: sol.dt_star,
    };
    Ok((sol, segment))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoopStatus {
    Converged,
    HorizonFloorReached,
    Infeasible,
    StepCap,
}

impl fmt::Display for LoopStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LoopStatus::Converged => "converged",
            LoopStatus::HorizonFloorReached => "horizon-floor-reached",
            LoopStatus::Infeasible => "infeasible",
            LoopStatus::StepCap => "step-cap",
        };
        f.write_str(s)
    }
}

/// One closed-loop step: the state the problem was solved from, the solved
/// horizon and interval, and the solver outcome.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub n: usize,
    pub t: f64,
    pub state: Vec<f64>,
    pub horizon: usize,
    pub dt_star: f64,
    pub t_f_star: f64,
    pub solver_status: SolverStatus,
    pub wall_seconds: f64,
}

/// Full record of a closed-loop run.
#[derive(Debug, Clone)]
pub struct ClosedLoopLog {
    pub records: Vec<StepRecord>,
    pub status: LoopStatus,
    pub final_state: Vec<f64>,
    pub final_time: f64,
    pub n_min: usize,
    pub dt_min: f64,
    pub convergence_radius: f64,
}

impl ClosedLoopLog {
    pub fn converged(&self) -> bool {
        self.status == LoopStatus::Converged
    }
}

// Consecutive fully-clamped floor steps after which the loop gives up on
// shrinking further; the cost is pinned at N_min * dt_min at that point.
const FLOOR_EXIT_STREAK: usize = 20;

/// Runs the shrinking-horizon loop from `x0`, applying each step's first
/// segment to `plant` (which may differ from the template's model for
/// mismatch studies). Solver failures terminate the log with status
/// `infeasible`; so do plant propagation failures.
pub fn run_closed_loop(
    x0: &[f64],
    plant: &SystemModel,
    template: &OcpSpec,
    cfg: &MpcConfig,
) -> Result<ClosedLoopLog, MpcError> {
    cfg.validate()?;
    if plant.state_dim() != template.model.state_dim()
        || plant.control_dim() != template.model.control_dim()
    {
        return Err(MpcError::InvalidConfig(
            "plant dimensions do not match the controller model".into(),
        ));
    }
    if x0.len() != template.model.state_dim() {
        return Err(MpcError::InvalidConfig("x0 has the wrong dimension".into()));
    }

    let mut records = Vec::new();
    let mut x = x0.to_vec();
    let mut t = 0.0;
    let mut horizon = cfg.n0;
    let mut prev: Option<Solution> = None;
    let mut floor_streak = 0usize;
    let status;

    loop {
        if template.target.distance(&x) <= cfg.convergence_radius {
            status = LoopStatus::Converged;
            break;
        }
        if records.len() >= cfg.max_steps {
            status = LoopStatus::StepCap;
            break;
        }
        let clock = Instant::now();
        match mpc_step(&x, horizon, template, cfg, prev.as_ref()) {
            Ok((sol, segment)) => {
                records.push(StepRecord {
                    n: records.len(),
                    t,
                    state: x.clone(),
                    horizon,
                    dt_star: sol.dt_star,
                    t_f_star: sol.t_f_star,
                    solver_status: SolverStatus::Optimal,
                    wall_seconds: clock.elapsed().as_secs_f64(),
                });
                match propagate(plant, &x, &segment, sol.dt_star, &cfg.propagator) {
                    Ok(traj) => x = traj.final_state().to_vec(),
                    Err(_) => {
                        status = LoopStatus::Infeasible;
                        break;
                    }
                }
                t += sol.dt_star;
                let clamped = sol.dt_star <= cfg.dt_min * (1.0 + 1e-9);
                if horizon == cfg.n_min && clamped && cfg.dt_min > 0.0 {
                    floor_streak += 1;
                } else {
                    floor_streak = 0;
                }
                if floor_streak >= FLOOR_EXIT_STREAK {
                    status = LoopStatus::HorizonFloorReached;
                    break;
                }
                prev = Some(sol);
                horizon = horizon.saturating_sub(1).max(cfg.n_min);
            }
            Err(MpcError::SolveFailed {
                status: solver_status,
                ..
            }) => {
                records.push(StepRecord {
                    n: records.len(),
                    t,
                    state: x.clone(),
                    horizon,
                    dt_star: f64::NAN,
                    t_f_star: f64::NAN,
                    solver_status,
                    wall_seconds: clock.elapsed().as_secs_f64(),
                });
                status = LoopStatus::Infeasible;
                break;
            }
            Err(other) => return Err(other),
        }
    }

    Ok(ClosedLoopLog {
        records,
        status,
        final_state: x,
        final_time: t,
        n_min: cfg.n_min,
        dt_min: cfg.dt_min,
        convergence_radius: cfg.convergence_radius,
    })
}

/// Writes the per-step log as CSV: `n, t_n, x components, N_n, dt_star,
/// t_f_star, status`.
pub fn write_closed_loop_csv<W: Write>(log: &ClosedLoopLog, out: &mut W) -> io::Result<()> {
    let p = log
        .records
        .first()
        .map(|r| r.state.len())
        .unwrap_or_else(|| log.final_state.len());
    let mut header = vec!["n".to_string(), "t".to_string()];
    header.extend((0..p).map(|i| format!("x{}", i + 1)));
    header.extend(
        ["horizon", "dt_star", "t_f_star", "status"]
            .iter()
            .map(|s| s.to_string()),
    );
    writeln!(out, "{}", header.join(","))?;
    for r in &log.records {
        let mut row = vec![format!("{}", r.n), format!("{}", r.t)];
        row.extend(r.state.iter().map(|v| format!("{v}")));
        row.push(format!("{}", r.horizon));
        row.push(format!("{}", r.dt_star));
        row.push(format!("{}", r.t_f_star));
        row.push(format!("{}", r.solver_status));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Per-step deviation from the time-optimal dynamic-programming identity
/// `t_f*(x_n, N_n) = dt*_n + t_f*(x_{n+1}, N_n - 1)` on nominal runs.
#[derive(Debug, Clone)]
pub struct OptimalityStep {
    pub n: usize,
    pub deviation: f64,
}

#[derive(Debug, Clone)]
pub struct OptimalityReport {
    pub steps: Vec<OptimalityStep>,
    pub worst: f64,
    pub tol: f64,
}

impl OptimalityReport {
    pub fn all_within(&self) -> bool {
        self.worst <= self.tol
    }
}

/// Checks the optimality-principle identity on every step whose horizon is
/// still above the floor (so the shrink actually dropped one partition).
pub fn check_optimality_principle(log: &ClosedLoopLog, tol: f64) -> OptimalityReport {
    let mut steps = Vec::new();
    let mut worst: f64 = 0.0;
    for w in log.records.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if a.horizon <= log.n_min {
            continue;
        }
        if a.solver_status != SolverStatus::Optimal || b.solver_status != SolverStatus::Optimal {
            continue;
        }
        let deviation = (b.t_f_star - (a.t_f_star - a.dt_star)).abs();
        worst = worst.max(deviation);
        steps.push(OptimalityStep {
            n: a.n,
            deviation,
        });
    }
    OptimalityReport { steps, worst, tol }
}

/// Per-step view of the cost-as-Lyapunov-function descent.
#[derive(Debug, Clone)]
pub struct LyapunovStep {
    pub n: usize,
    /// `V_n = t_f*_n`.
    pub value: f64,
    /// `V_{n+1} <= V_n - dt*_n + tol`; `None` for the last record.
    pub decrease_ok: Option<bool>,
    pub at_floor: bool,
    /// Interval clamped at `dt_min`.
    pub clamped: bool,
}

#[derive(Debug, Clone)]
pub struct LyapunovReport {
    pub steps: Vec<LyapunovStep>,
    /// Descent held on every step with horizon above the floor.
    pub pre_floor_ok: bool,
    /// `dt*_n >= dt_min` on every step.
    pub dt_min_respected: bool,
    pub first_clamped: Option<usize>,
}

/// Verifies the Lyapunov decrease `V_{n+1} <= V_n - dt*_n + tol` while the
/// horizon is above the floor, that the interval never undercuts `dt_min`,
/// and flags the clamped phase near the target.
pub fn lyapunov_decrease_report(log: &ClosedLoopLog, tol: f64) -> LyapunovReport {
    let mut steps = Vec::new();
    let mut pre_floor_ok = true;
    let mut dt_min_respected = true;
    let mut first_clamped = None;
    for (i, r) in log.records.iter().enumerate() {
        if r.solver_status != SolverStatus::Optimal {
            continue;
        }
        if r.dt_star < log.dt_min * (1.0 - 1e-9) {
            dt_min_respected = false;
        }
        let clamped = log.dt_min > 0.0 && r.dt_star <= log.dt_min * (1.0 + 1e-9);
        if clamped && first_clamped.is_none() {
            first_clamped = Some(r.n);
        }
        let decrease_ok = log.records.get(i + 1).map(|next| {
            next.t_f_star <= r.t_f_star - r.dt_star + tol
        });
        if r.horizon > log.n_min {
            if let Some(false) = decrease_ok {
                pre_floor_ok = false;
            }
        }
        steps.push(LyapunovStep {
            n: r.n,
            value: r.t_f_star,
            decrease_ok,
            at_floor: r.horizon == log.n_min,
            clamped,
        });
    }
    LyapunovReport {
        steps,
        pre_floor_ok,
        dt_min_respected,
        first_clamped,
    }
}

/// One `(distance to target, minimum time)` pair.
#[derive(Debug, Clone, Copy)]
pub struct CostBoundSample {
    pub distance: f64,
    pub t_f_star: f64,
}

#[derive(Debug, Clone)]
pub struct CostBoundData {
    pub samples: Vec<CostBoundSample>,
    pub infeasible: usize,
}

/// Solves the template problem from each sampled start state and collects
/// distance/cost pairs; non-optimal solves are counted and excluded. The
/// template must have `dt_min = 0` so the cost can approach zero at the
/// target.
pub fn cost_bound_sampling(
    template: &OcpSpec,
    states: &[Vec<f64>],
    solver_cfg: &SolverConfig,
) -> Result<CostBoundData, MpcError> {
    if template.dt_min != 0.0 {
        return Err(MpcError::InvalidConfig(
            "cost-bound sampling requires dt_min = 0".into(),
        ));
    }
    let mut samples = Vec::new();
    let mut infeasible = 0usize;
    for state in states {
        let mut spec = template.clone();
        spec.x_start = state.clone();
        let sol = crate::solve_ocp(&spec, solver_cfg)?;
        if sol.solver.status == SolverStatus::Optimal {
            samples.push(CostBoundSample {
                distance: template.target.distance(state),
                t_f_star: sol.t_f_star,
            });
        } else {
            infeasible += 1;
        }
    }
    Ok(CostBoundData {
        samples,
        infeasible,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{double_integrator, vdp, vdp_with_damping};
    use crate::transcription::{Bounds, TargetSpec};

    fn vdp_template() -> OcpSpec {
        OcpSpec::new(
            vdp(),
            vec![0.0, 0.0],
            TargetSpec::fixed(&[0.8, 0.0]),
            Bounds::symmetric(1, 1.0),
            8,
        )
    }

    fn di_template() -> OcpSpec {
        OcpSpec::new(
            double_integrator(),
            vec![1.0, 0.0],
            TargetSpec::fixed(&[0.0, 0.0]),
            Bounds::symmetric(1, 1.0),
            20,
        )
    }

    #[test]
    fn step_at_target_clamps_interval_to_floor() {
        let template = vdp_template();
        let mut cfg = MpcConfig::new(5, 2);
        cfg.dt_min = 1e-3;
        let (sol, segment) = mpc_step(&[0.8, 0.0], 5, &template, &cfg, None).unwrap();
        assert!(
            (sol.dt_star - 1e-3).abs() < 1e-9,
            "cost floor should pin dt* to dt_min, got {}",
            sol.dt_star
        );
        assert!((segment.duration - sol.dt_star).abs() < 1e-15);
    }

    #[test]
    fn step_reaches_bang_bang_time() {
        let template = di_template();
        let mut cfg = MpcConfig::new(20, 4);
        cfg.dt_min = 1e-4;
        let (sol, _) = mpc_step(&[1.0, 0.0], 20, &template, &cfg, None).unwrap();
        assert!(
            (sol.t_f_star - 2.0).abs() / 2.0 < 0.02,
            "t_f* = {} should be within 2% of 2",
            sol.t_f_star
        );
    }

    #[test]
    fn horizon_below_floor_is_rejected() {
        let template = vdp_template();
        let cfg = MpcConfig::new(8, 4);
        assert!(matches!(
            mpc_step(&[0.1, 0.0], 3, &template, &cfg, None),
            Err(MpcError::HorizonBelowFloor { .. })
        ));
    }

    #[test]
    fn loop_converges_immediately_at_target() {
        let template = vdp_template();
        let cfg = MpcConfig::new(8, 3);
        let log = run_closed_loop(&[0.8, 0.0], &vdp(), &template, &cfg).unwrap();
        assert_eq!(log.status, LoopStatus::Converged);
        assert!(log.records.is_empty(), "no steps needed from the target");
        assert_eq!(log.final_time, 0.0);
    }

    #[test]
    fn nominal_vdp_loop_converges_with_horizon_rule() {
        let template = vdp_template();
        let mut cfg = MpcConfig::new(8, 3);
        cfg.convergence_radius = 0.05;
        cfg.dt_min = 1e-3;
        let log = run_closed_loop(&[0.0, 0.0], &vdp(), &template, &cfg).unwrap();
        assert_eq!(log.status, LoopStatus::Converged, "final state {:?}", log.final_state);
        assert!(!log.records.is_empty());
        // horizon shrink rule and time bookkeeping hold exactly
        for w in log.records.windows(2) {
            assert_eq!(w[1].horizon, (w[0].horizon - 1).max(cfg.n_min));
            assert!((w[1].t - (w[0].t + w[0].dt_star)).abs() < 1e-12);
        }
        assert!(template.target.distance(&log.final_state) <= 0.05);
    }

    #[test]
    fn optimality_principle_holds_on_nominal_run_and_degrades_with_mismatch() {
        let template = vdp_template();
        let mut cfg = MpcConfig::new(8, 3);
        cfg.convergence_radius = 0.05;
        let nominal = run_closed_loop(&[0.0, 0.0], &vdp(), &template, &cfg).unwrap();
        let nominal_report = check_optimality_principle(&nominal, 1e-3);
        assert!(!nominal_report.steps.is_empty());
        assert!(
            nominal_report.all_within(),
            "worst deviation {}",
            nominal_report.worst
        );

        let mismatched = run_closed_loop(&[0.0, 0.0], &vdp_with_damping(1.1), &template, &cfg)
            .unwrap();
        let mismatch_report = check_optimality_principle(&mismatched, 1e-3);
        assert!(
            mismatch_report.worst > nominal_report.worst,
            "mismatch {} should exceed nominal {}",
            mismatch_report.worst,
            nominal_report.worst
        );
    }

    #[test]
    fn single_step_log_gives_empty_optimality_report() {
        let log = ClosedLoopLog {
            records: vec![StepRecord {
                n: 0,
                t: 0.0,
                state: vec![0.0, 0.0],
                horizon: 5,
                dt_star: 0.1,
                t_f_star: 0.5,
                solver_status: SolverStatus::Optimal,
                wall_seconds: 0.0,
            }],
            status: LoopStatus::Converged,
            final_state: vec![0.0, 0.0],
            final_time: 0.1,
            n_min: 2,
            dt_min: 1e-3,
            convergence_radius: 0.02,
        };
        let report = check_optimality_principle(&log, 1e-3);
        assert!(report.steps.is_empty());
        assert_eq!(report.worst, 0.0);
    }

    #[test]
    fn lyapunov_report_on_nominal_run() {
        let template = vdp_template();
        let mut cfg = MpcConfig::new(8, 3);
        cfg.convergence_radius = 0.05;
        let log = run_closed_loop(&[0.0, 0.0], &vdp(), &template, &cfg).unwrap();
        let report = lyapunov_decrease_report(&log, 1e-3);
        assert!(report.pre_floor_ok, "cost must shrink by dt* per pre-floor step");
        assert!(report.dt_min_respected);
    }

    #[test]
    fn warm_start_matches_cold_start_cost() {
        let template = vdp_template();
        let mut warm_cfg = MpcConfig::new(8, 3);
        warm_cfg.convergence_radius = 0.05;
        let mut cold_cfg = warm_cfg.clone();
        cold_cfg.warm_start = false;
        let warm = run_closed_loop(&[0.0, 0.0], &vdp(), &template, &warm_cfg).unwrap();
        let cold = run_closed_loop(&[0.0, 0.0], &vdp(), &template, &cold_cfg).unwrap();
        let n = warm.records.len().min(cold.records.len());
        assert!(n > 3);
        for i in 0..n {
            let (a, b) = (warm.records[i].t_f_star, cold.records[i].t_f_star);
            assert!(
                (a - b).abs() <= 1e-4 * b.abs().max(1e-6),
                "step {i}: warm {a} vs cold {b}"
            );
        }
    }

    #[test]
    fn cost_bound_sampling_on_double_integrator_oracle() {
        let mut template = di_template();
        template.n_partitions = 30;
        template.dt_min = 0.0;
        let states: Vec<Vec<f64>> = vec![vec![0.25, 0.0], vec![1.0, 0.0], vec![4.0, 0.0],
            vec![0.0, 0.0]];
        let data = cost_bound_sampling(&template, &states, &SolverConfig::default()).unwrap();
        assert_eq!(data.infeasible, 0);
        for (s, &d) in data.samples.iter().zip(&[0.25f64, 1.0, 4.0]) {
            let expected = 2.0 * d.sqrt();
            assert!(
                (s.t_f_star - expected).abs() / expected < 0.02,
                "d = {d}: t_f* = {} vs {expected}",
                s.t_f_star
            );
        }
        let at_target = data.samples.last().unwrap();
        assert!(at_target.t_f_star <= 1e-6, "t_f* at the target sample: {}", at_target.t_f_star);
    }

    #[test]
    fn closed_loop_csv_round_trip_shape() {
        let template = vdp_template();
        let mut cfg = MpcConfig::new(6, 3);
        cfg.convergence_radius = 0.1;
        let log = run_closed_loop(&[0.0, 0.0], &vdp(), &template, &cfg).unwrap();
        let mut buf = Vec::new();
        write_closed_loop_csv(&log, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "n,t,x1,x2,horizon,dt_star,t_f_star,status"
        );
        assert_eq!(lines.count(), log.records.len());
    }
}
