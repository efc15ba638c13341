//! Continuous-time reconstruction of solved trajectories and the metrics
//! used to judge them.
//!
//! A [`Solution`] wraps the optimized decision vector as two splines: the
//! control spline dictated by the parameterization and a piecewise-cubic
//! state spline with a knot at every partition midpoint, so grid and
//! midpoint states are interpolated exactly and the spline's derivative at
//! each knot equals the vector field there. Metrics re-integrate the plant
//! under the reconstructed control to measure how far the transcription
//! drifted from the true flow, sample constraint violations between
//! collocation points, and accumulate the control's total variation.

use std::fmt;
use std::io::{self, Write};

use crate::solver::SolverResult;
use crate::systems::{
    propagate, ControlSignal, PropagationError, PropagatorConfig, SystemError,
};
use crate::transcription::{
    hermite_midpoint, layout_variables, CollocationForm, ControlParam, OcpSpec,
    TranscriptionError,
};

#[derive(Debug)]
pub enum TrajectoryError {
    /// Evaluation time outside `[0, t_f]`.
    OutOfRange { t: f64, t_f: f64 },
    Transcription(TranscriptionError),
    Dynamics(SystemError),
    Propagation(PropagationError),
}

impl fmt::Display for TrajectoryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrajectoryError::OutOfRange { t, t_f } => {
                write!(f, "time {t} outside the trajectory span [0, {t_f}]")
            }
            TrajectoryError::Transcription(e) => write!(f, "{e}"),
            TrajectoryError::Dynamics(e) => write!(f, "{e}"),
            TrajectoryError::Propagation(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrajectoryError {}

impl From<TranscriptionError> for TrajectoryError {
    fn from(e: TranscriptionError) -> Self {
        TrajectoryError::Transcription(e)
    }
}

impl From<SystemError> for TrajectoryError {
    fn from(e: SystemError) -> Self {
        TrajectoryError::Dynamics(e)
    }
}

impl From<PropagationError> for TrajectoryError {
    fn from(e: PropagationError) -> Self {
        TrajectoryError::Propagation(e)
    }
}

/// Locates the partition containing `t`, snapping to the nearest grid
/// point when floating-point jitter puts `t` within 1e-9 of one.
fn partition_index(t: f64, dt: f64, n: usize) -> (usize, f64) {
    if dt <= 0.0 || n == 0 {
        return (0, 0.0);
    }
    let s = t / dt;
    let r = s.round();
    let k = if (s - r).abs() < 1e-9 { r } else { s.floor() };
    let k = (k.max(0.0) as usize).min(n - 1);
    let tau = (t - k as f64 * dt).clamp(0.0, dt);
    (k, tau)
}

/// Like [`partition_index`] but resolving exact breakpoints to the
/// partition on their left.
fn partition_index_left(t: f64, dt: f64, n: usize) -> (usize, f64) {
    if dt <= 0.0 || n == 0 {
        return (0, 0.0);
    }
    let s = t / dt;
    let r = s.round();
    let k = if (s - r).abs() < 1e-9 {
        if r >= 1.0 {
            r - 1.0
        } else {
            0.0
        }
    } else {
        s.floor()
    };
    let k = (k.max(0.0) as usize).min(n - 1);
    let tau = (t - k as f64 * dt).clamp(0.0, dt);
    (k, tau)
}

/// Per-parameterization control spline on the uniform grid `t_k = k * dt`.
///
/// Knot storage follows the parameterization: `quadratic`/`linear` hold
/// `2N + 1` values (grid and midpoint knots interleaved), `mean` holds
/// `N + 1`, `constant` holds `N`. The constant variant is right-continuous
/// at breakpoints and extends its last segment to the closed endpoint.
#[derive(Debug, Clone)]
pub struct ControlSpline {
    variant: ControlParam,
    dt: f64,
    n: usize,
    q: usize,
    knots: Vec<Vec<f64>>,
}

impl ControlSpline {
    pub fn new(variant: ControlParam, dt: f64, n: usize, q: usize, knots: Vec<Vec<f64>>) -> Self {
        assert_eq!(knots.len(), variant.knot_count(n), "knot count mismatch");
        assert!(knots.iter().all(|k| k.len() == q));
        assert!(dt >= 0.0 && n >= 1);
        ControlSpline {
            variant,
            dt,
            n,
            q,
            knots,
        }
    }

    pub fn variant(&self) -> ControlParam {
        self.variant
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_partitions(&self) -> usize {
        self.n
    }

    pub fn duration(&self) -> f64 {
        self.dt * self.n as f64
    }

    /// Grid knot `u_k`; for the constant variant `k = N` maps to the last
    /// stored segment value.
    pub fn grid_knot(&self, k: usize) -> &[f64] {
        match self.variant {
            ControlParam::Quadratic | ControlParam::Linear => &self.knots[2 * k],
            ControlParam::Mean => &self.knots[k],
            ControlParam::Constant => &self.knots[k.min(self.n - 1)],
        }
    }

    /// Midpoint knot of partition `k` when the variant stores one.
    pub fn mid_knot(&self, k: usize) -> Option<&[f64]> {
        match self.variant {
            ControlParam::Quadratic | ControlParam::Linear => Some(&self.knots[2 * k + 1]),
            _ => None,
        }
    }

    fn eval_partition(&self, k: usize, tau: f64) -> Vec<f64> {
        let dt = self.dt;
        match self.variant {
            ControlParam::Constant => self.knots[k].clone(),
            ControlParam::Mean => {
                let theta = if dt > 0.0 { tau / dt } else { 0.0 };
                let (a, b) = (&self.knots[k], &self.knots[k + 1]);
                (0..self.q).map(|i| a[i] + theta * (b[i] - a[i])).collect()
            }
            ControlParam::Linear => {
                let half = 0.5 * dt;
                let (a, b, tloc) = if tau <= half {
                    (&self.knots[2 * k], &self.knots[2 * k + 1], tau)
                } else {
                    (&self.knots[2 * k + 1], &self.knots[2 * k + 2], tau - half)
                };
                let theta = if half > 0.0 { tloc / half } else { 0.0 };
                (0..self.q).map(|i| a[i] + theta * (b[i] - a[i])).collect()
            }
            ControlParam::Quadratic => {
                let u0 = &self.knots[2 * k];
                let um = &self.knots[2 * k + 1];
                let u1 = &self.knots[2 * k + 2];
                if dt <= 0.0 {
                    return u0.clone();
                }
                (0..self.q)
                    .map(|i| {
                        let b1 = -(3.0 * u0[i] - 4.0 * um[i] + u1[i]) / dt;
                        let b2 = 2.0 * (u0[i] - 2.0 * um[i] + u1[i]) / (dt * dt);
                        u0[i] + b1 * tau + b2 * tau * tau
                    })
                    .collect()
            }
        }
    }

    /// Right-continuous evaluation with `t` clamped into the spline span.
    pub fn eval_clamped(&self, t: f64) -> Vec<f64> {
        let t = t.clamp(0.0, self.duration());
        let (k, tau) = partition_index(t, self.dt, self.n);
        self.eval_partition(k, tau)
    }

    /// Left-limit evaluation; differs from [`ControlSpline::eval_clamped`]
    /// only for the discontinuous constant variant.
    pub fn eval_left_clamped(&self, t: f64) -> Vec<f64> {
        let t = t.clamp(0.0, self.duration());
        let (k, tau) = partition_index_left(t, self.dt, self.n);
        self.eval_partition(k, tau)
    }
}

impl ControlSignal for ControlSpline {
    fn eval(&self, t: f64) -> Vec<f64> {
        self.eval_clamped(t)
    }

    fn eval_left(&self, t: f64) -> Vec<f64> {
        self.eval_left_clamped(t)
    }

    fn breakpoints(&self, t_end: f64) -> Vec<f64> {
        let mut pts = Vec::new();
        if self.dt <= 0.0 {
            return pts;
        }
        // partition joins are kinks (or jumps) for every variant; the linear
        // variant also bends at partition midpoints
        let step = match self.variant {
            ControlParam::Linear => 0.5 * self.dt,
            _ => self.dt,
        };
        let mut t = step;
        while t < t_end - 1e-12 * t_end.max(1.0) {
            pts.push(t);
            t += step;
        }
        pts
    }
}

/// One partition of the state spline: values and tangents at the left
/// endpoint, midpoint, and right endpoint.
#[derive(Debug, Clone)]
pub struct PartitionArc {
    pub x0: Vec<f64>,
    pub f0: Vec<f64>,
    pub xm: Vec<f64>,
    pub fm: Vec<f64>,
    pub x1: Vec<f64>,
    pub f1: Vec<f64>,
}

/// Piecewise-cubic state spline with Hermite data on half-partitions, so
/// it interpolates grid states and midpoint states exactly.
#[derive(Debug, Clone)]
pub struct StateSpline {
    dt: f64,
    p: usize,
    arcs: Vec<PartitionArc>,
}

fn hermite_eval(a: &[f64], fa: &[f64], b: &[f64], fb: &[f64], h: f64, tau: f64) -> Vec<f64> {
    if h <= 0.0 {
        return a.to_vec();
    }
    let s = tau / h;
    let (s2, s3) = (s * s, s * s * s);
    let h00 = 1.0 - 3.0 * s2 + 2.0 * s3;
    let h10 = s - 2.0 * s2 + s3;
    let h01 = 3.0 * s2 - 2.0 * s3;
    let h11 = -s2 + s3;
    (0..a.len())
        .map(|i| h00 * a[i] + h10 * h * fa[i] + h01 * b[i] + h11 * h * fb[i])
        .collect()
}

fn hermite_deriv(a: &[f64], fa: &[f64], b: &[f64], fb: &[f64], h: f64, tau: f64) -> Vec<f64> {
    if h <= 0.0 {
        return fa.to_vec();
    }
    let s = tau / h;
    let d00 = (6.0 * s * s - 6.0 * s) / h;
    let d10 = 3.0 * s * s - 4.0 * s + 1.0;
    let d01 = (-6.0 * s * s + 6.0 * s) / h;
    let d11 = 3.0 * s * s - 2.0 * s;
    (0..a.len())
        .map(|i| d00 * a[i] + d10 * fa[i] + d01 * b[i] + d11 * fb[i])
        .collect()
}

impl StateSpline {
    pub fn new(dt: f64, p: usize, arcs: Vec<PartitionArc>) -> Self {
        assert!(!arcs.is_empty());
        StateSpline { dt, p, arcs }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_partitions(&self) -> usize {
        self.arcs.len()
    }

    pub fn duration(&self) -> f64 {
        self.dt * self.arcs.len() as f64
    }

    pub fn arcs(&self) -> &[PartitionArc] {
        &self.arcs
    }

    pub fn eval_clamped(&self, t: f64) -> Vec<f64> {
        let t = t.clamp(0.0, self.duration());
        let (k, tau) = partition_index(t, self.dt, self.arcs.len());
        let arc = &self.arcs[k];
        let half = 0.5 * self.dt;
        if tau <= half {
            hermite_eval(&arc.x0, &arc.f0, &arc.xm, &arc.fm, half, tau)
        } else {
            hermite_eval(&arc.xm, &arc.fm, &arc.x1, &arc.f1, half, tau - half)
        }
    }

    /// Time derivative of the spline; right-continuous at knots.
    pub fn deriv_clamped(&self, t: f64) -> Vec<f64> {
        let t = t.clamp(0.0, self.duration());
        let (k, tau) = partition_index(t, self.dt, self.arcs.len());
        let arc = &self.arcs[k];
        let half = 0.5 * self.dt;
        if tau <= half {
            hermite_deriv(&arc.x0, &arc.f0, &arc.xm, &arc.fm, half, tau)
        } else {
            hermite_deriv(&arc.xm, &arc.fm, &arc.x1, &arc.f1, half, tau - half)
        }
    }

    pub fn state_dim(&self) -> usize {
        self.p
    }
}

/// A solved minimum-time problem: optimal interval, reconstructed splines,
/// and the raw solver diagnostics.
#[derive(Debug, Clone)]
pub struct Solution {
    pub spec: OcpSpec,
    pub solver: SolverResult,
    pub dt_star: f64,
    pub t_f_star: f64,
    pub control: ControlSpline,
    pub state: StateSpline,
}

impl Solution {
    /// Reconstructs splines from a decision vector produced for `spec`.
    pub fn from_decision(spec: OcpSpec, solver: SolverResult) -> Result<Solution, TrajectoryError> {
        let layout = layout_variables(&spec);
        layout.check_len(&solver.z)?;
        let z = &solver.z;
        let n = spec.n_partitions;
        let q = spec.model.control_dim();
        let dt_star = z[layout.dt()];
        let t_f_star = n as f64 * dt_star;

        let knot_count = spec.param.knot_count(n);
        let mut knots = Vec::with_capacity(knot_count);
        match spec.param {
            ControlParam::Quadratic | ControlParam::Linear => {
                for k in 0..n {
                    let g = layout.u_grid(k);
                    knots.push(z[g..g + q].to_vec());
                    let m = layout.u_mid(k).unwrap();
                    knots.push(z[m..m + q].to_vec());
                }
                let g = layout.u_grid(n);
                knots.push(z[g..g + q].to_vec());
            }
            ControlParam::Mean => {
                for k in 0..=n {
                    let g = layout.u_grid(k);
                    knots.push(z[g..g + q].to_vec());
                }
            }
            ControlParam::Constant => {
                for k in 0..n {
                    let g = layout.u_grid(k);
                    knots.push(z[g..g + q].to_vec());
                }
            }
        }
        let control = ControlSpline::new(spec.param, dt_star, n, q, knots);

        let mut arcs = Vec::with_capacity(n);
        for k in 0..n {
            let x0 = layout.state_at(z, k).to_vec();
            let x1 = layout.state_at(z, k + 1).to_vec();
            let (u_l, u_m, u_r) = layout.partition_controls(z, k);
            let f0 = spec.model.eval(&x0, &u_l)?;
            let f1 = spec.model.eval(&x1, &u_r)?;
            let xm = match spec.form {
                CollocationForm::Compressed => {
                    hermite_midpoint(&spec.model, &x0, &u_l, &x1, &u_r, dt_star)?
                }
                CollocationForm::Uncompressed => layout.mid_state_at(z, k).unwrap().to_vec(),
            };
            let fm = spec.model.eval(&xm, &u_m)?;
            arcs.push(PartitionArc {
                x0,
                f0,
                xm,
                fm,
                x1,
                f1,
            });
        }
        let state = StateSpline::new(dt_star, spec.model.state_dim(), arcs);

        Ok(Solution {
            spec,
            solver,
            dt_star,
            t_f_star,
            control,
            state,
        })
    }

    fn check_span(&self, t: f64) -> Result<(), TrajectoryError> {
        let slop = 1e-9 * self.t_f_star.max(1.0);
        if t < -slop || t > self.t_f_star + slop {
            return Err(TrajectoryError::OutOfRange {
                t,
                t_f: self.t_f_star,
            });
        }
        Ok(())
    }

    /// Control spline value at `t`, right-continuous at breakpoints.
    pub fn eval_control(&self, t: f64) -> Result<Vec<f64>, TrajectoryError> {
        self.check_span(t)?;
        Ok(self.control.eval_clamped(t))
    }

    /// State spline value at `t`.
    pub fn eval_state(&self, t: f64) -> Result<Vec<f64>, TrajectoryError> {
        self.check_span(t)?;
        Ok(self.state.eval_clamped(t))
    }
}

/// Running transcription-error integral against the re-integrated plant.
#[derive(Debug, Clone)]
pub struct ErrorProfile {
    pub times: Vec<f64>,
    /// `integral over [0, t_i] of |x_spline - x_plant|_2`.
    pub cumulative: Vec<f64>,
    /// `|x_plant(t_f) - x_spline(t_f)|_2`.
    pub terminal_mismatch: f64,
}

impl ErrorProfile {
    pub fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Re-integrates the plant under the reconstructed control and accumulates
/// the running mismatch between the state spline and the true flow.
pub fn dynamics_error(
    sol: &Solution,
    cfg: &PropagatorConfig,
    n_samples: usize,
) -> Result<ErrorProfile, TrajectoryError> {
    assert!(n_samples >= 2);
    if sol.t_f_star <= 0.0 {
        return Ok(ErrorProfile {
            times: vec![0.0],
            cumulative: vec![0.0],
            terminal_mismatch: 0.0,
        });
    }
    let traj = propagate(
        &sol.spec.model,
        &sol.spec.x_start,
        &sol.control,
        sol.t_f_star,
        cfg,
    )?;
    let mut times = Vec::with_capacity(n_samples + 1);
    let mut cumulative = Vec::with_capacity(n_samples + 1);
    let mut acc = 0.0;
    let mut prev_err = 0.0;
    for i in 0..=n_samples {
        let t = sol.t_f_star * i as f64 / n_samples as f64;
        let err = l2(&sol.state.eval_clamped(t), &traj.sample(t));
        if i > 0 {
            let h = sol.t_f_star / n_samples as f64;
            acc += 0.5 * (prev_err + err) * h;
        }
        times.push(t);
        cumulative.push(acc);
        prev_err = err;
    }
    let terminal_mismatch = l2(traj.final_state(), &sol.state.eval_clamped(sol.t_f_star));
    Ok(ErrorProfile {
        times,
        cumulative,
        terminal_mismatch,
    })
}

/// Maximum positive violation of one box or path constraint over the dense
/// sample grid, and the time it was attained.
#[derive(Debug, Clone)]
pub struct ViolationRecord {
    pub label: String,
    pub max_violation: f64,
    pub at_time: f64,
}

struct ConstraintSet {
    labels: Vec<String>,
}

impl ConstraintSet {
    fn for_spec(spec: &OcpSpec) -> ConstraintSet {
        let mut labels = Vec::new();
        for i in 0..spec.model.control_dim() {
            labels.push(format!("u{}_lower", i + 1));
            labels.push(format!("u{}_upper", i + 1));
        }
        for i in 0..spec.model.state_dim() {
            if spec.x_bounds.lower[i].is_finite() {
                labels.push(format!("x{}_lower", i + 1));
            }
            if spec.x_bounds.upper[i].is_finite() {
                labels.push(format!("x{}_upper", i + 1));
            }
        }
        if let Some(path) = &spec.path_ineq {
            for r in 0..path.dim {
                labels.push(format!("path{}", r + 1));
            }
        }
        ConstraintSet { labels }
    }

    /// Signed margins at one sample; positive means violated.
    fn margins(&self, spec: &OcpSpec, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.labels.len());
        for i in 0..spec.model.control_dim() {
            out.push(spec.u_bounds.lower[i] - u[i]);
            out.push(u[i] - spec.u_bounds.upper[i]);
        }
        for i in 0..spec.model.state_dim() {
            if spec.x_bounds.lower[i].is_finite() {
                out.push(spec.x_bounds.lower[i] - x[i]);
            }
            if spec.x_bounds.upper[i].is_finite() {
                out.push(x[i] - spec.x_bounds.upper[i]);
            }
        }
        if let Some(path) = &spec.path_ineq {
            out.extend((path.g)(x));
        }
        out
    }
}

fn sample_times(sol: &Solution, samples_per_partition: usize) -> Vec<f64> {
    let n = sol.spec.n_partitions;
    let mut times = Vec::with_capacity(n * samples_per_partition + 1);
    for k in 0..n {
        for s in 0..samples_per_partition {
            let frac = s as f64 / samples_per_partition as f64;
            times.push((k as f64 + frac) * sol.dt_star);
        }
    }
    times.push(sol.t_f_star);
    times
}

/// Densely samples the splines and reports, per constraint, the worst
/// positive violation and where it occurs. `samples_per_partition >= 10`.
pub fn violation_profile(sol: &Solution, samples_per_partition: usize) -> Vec<ViolationRecord> {
    assert!(samples_per_partition >= 10);
    let set = ConstraintSet::for_spec(&sol.spec);
    let times = sample_times(sol, samples_per_partition);
    let mut worst = vec![f64::NEG_INFINITY; set.labels.len()];
    let mut at = vec![0.0; set.labels.len()];
    for &t in &times {
        let u = sol.control.eval_clamped(t);
        let x = sol.state.eval_clamped(t);
        for (i, m) in set.margins(&sol.spec, &x, &u).into_iter().enumerate() {
            if m > worst[i] {
                worst[i] = m;
                at[i] = t;
            }
        }
    }
    set.labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| ViolationRecord {
            label,
            max_violation: worst[i].max(0.0),
            at_time: at[i],
        })
        .collect()
}

/// Total variation of each control channel over the dense sample grid.
pub fn total_variation(sol: &Solution, samples_per_partition: usize) -> Vec<f64> {
    assert!(samples_per_partition >= 1);
    let q = sol.spec.model.control_dim();
    let times = sample_times(sol, samples_per_partition);
    let mut tv = vec![0.0; q];
    let mut prev = sol.control.eval_clamped(times[0]);
    for &t in &times[1..] {
        let cur = sol.control.eval_clamped(t);
        for i in 0..q {
            tv[i] += (cur[i] - prev[i]).abs();
        }
        prev = cur;
    }
    tv
}

/// Writes the densely sampled trajectory as CSV: `t`, state components,
/// control components, then one positive-violation column per constraint.
pub fn write_samples_csv<W: Write>(
    sol: &Solution,
    samples_per_partition: usize,
    out: &mut W,
) -> io::Result<()> {
    let set = ConstraintSet::for_spec(&sol.spec);
    let p = sol.spec.model.state_dim();
    let q = sol.spec.model.control_dim();
    let mut header = vec!["t".to_string()];
    header.extend((0..p).map(|i| format!("x{}", i + 1)));
    header.extend((0..q).map(|i| format!("u{}", i + 1)));
    header.extend(set.labels.iter().map(|l| format!("viol_{l}")));
    writeln!(out, "{}", header.join(","))?;
    for t in sample_times(sol, samples_per_partition) {
        let x = sol.state.eval_clamped(t);
        let u = sol.control.eval_clamped(t);
        let mut row = vec![format!("{t}")];
        row.extend(x.iter().map(|v| format!("{v}")));
        row.extend(u.iter().map(|v| format!("{v}")));
        row.extend(
            set.margins(&sol.spec, &x, &u)
                .into_iter()
                .map(|m| format!("{}", m.max(0.0))),
        );
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{SolverStatus, SolverResult};
    use crate::systems::double_integrator;
    use crate::transcription::{Bounds, TargetSpec};
    use proptest::prelude::*;

    fn fabricated_result(z: Vec<f64>, cost: f64) -> SolverResult {
        SolverResult {
            z,
            status: SolverStatus::Optimal,
            kkt_residual: 0.0,
            constraint_violation: 0.0,
            cost,
            iterations: 0,
            inner_iterations: 0,
            function_evals: 0,
            eq_multipliers: Vec::new(),
            ineq_multipliers: Vec::new(),
            outer_trace: Vec::new(),
        }
    }

    fn spline(variant: ControlParam, dt: f64, n: usize, knots: Vec<f64>) -> ControlSpline {
        let knots = knots.into_iter().map(|v| vec![v]).collect();
        ControlSpline::new(variant, dt, n, 1, knots)
    }

    #[test]
    fn splines_interpolate_grid_knots() {
        let dt = 0.4;
        let cases: Vec<(ControlParam, Vec<f64>)> = vec![
            (ControlParam::Quadratic, vec![0.1, 0.9, -0.3, 0.5, 0.8]),
            (ControlParam::Linear, vec![0.1, 0.9, -0.3, 0.5, 0.8]),
            (ControlParam::Mean, vec![0.1, -0.3, 0.8]),
            (ControlParam::Constant, vec![0.1, -0.3]),
        ];
        for (variant, knots) in cases {
            let s = spline(variant, dt, 2, knots);
            for k in 0..=2usize {
                let expected = s.grid_knot(k)[0];
                let got = s.eval_clamped(k as f64 * dt)[0];
                assert!(
                    (got - expected).abs() < 1e-12,
                    "{variant} at knot {k}: {got} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn quadratic_vertex_at_midpoint() {
        let s = spline(ControlParam::Quadratic, 1.0, 1, vec![0.0, 1.0, 0.0]);
        assert!((s.eval_clamped(0.5)[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn mean_variant_averages_endpoints_at_midpoint() {
        let s = spline(ControlParam::Mean, 1.0, 1, vec![0.2, 0.8]);
        assert!((s.eval_clamped(0.5)[0] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn linear_variant_passes_through_midpoint_knot() {
        let s = spline(ControlParam::Linear, 1.0, 1, vec![0.0, 0.7, 0.2]);
        assert!((s.eval_clamped(0.5)[0] - 0.7).abs() < 1e-14);
        assert!((s.eval_clamped(0.25)[0] - 0.35).abs() < 1e-14);
    }

    #[test]
    fn constant_variant_is_right_continuous_and_closed_at_the_end() {
        let s = spline(ControlParam::Constant, 1.0, 2, vec![1.0, -1.0]);
        assert_eq!(s.eval_clamped(1.0)[0], -1.0, "right-continuous at the jump");
        assert_eq!(s.eval_left_clamped(1.0)[0], 1.0, "left limit before the jump");
        assert_eq!(s.eval_clamped(2.0)[0], -1.0, "last segment extends to t_f");
    }

    /// Exact rest-to-rest double-integrator solution used as fixture.
    fn exact_di_solution(n: usize, d: f64) -> Solution {
        let mut spec = OcpSpec::new(
            double_integrator(),
            vec![0.0, 0.0],
            TargetSpec::fixed(&[d, 0.0]),
            Bounds::symmetric(1, 1.0),
            n,
        );
        spec.param = ControlParam::Constant;
        let layout = layout_variables(&spec);
        let t_f = 2.0 * d.sqrt();
        let dt = t_f / n as f64;
        let switch = t_f / 2.0;
        let mut z = vec![0.0; layout.n_z()];
        z[layout.dt()] = dt;
        for k in 0..=n {
            let t = k as f64 * dt;
            let (pos, vel) = if t <= switch {
                (0.5 * t * t, t)
            } else {
                let tau = t - switch;
                (
                    0.5 * switch * switch + switch * tau - 0.5 * tau * tau,
                    switch - tau,
                )
            };
            z[layout.x_grid(k)] = pos;
            z[layout.x_grid(k) + 1] = vel;
        }
        for k in 0..n {
            z[layout.u_grid(k)] = if (k as f64 + 0.5) * dt < switch { 1.0 } else { -1.0 };
        }
        let res = fabricated_result(z, t_f);
        Solution::from_decision(spec, res).unwrap()
    }

    #[test]
    fn state_spline_matches_closed_form_quadratic_arc() {
        let sol = exact_di_solution(4, 1.0);
        let t_f = 2.0;
        let switch = 1.0;
        for i in 0..=200 {
            let t = t_f * i as f64 / 200.0;
            let x = sol.eval_state(t).unwrap();
            let (pos, vel) = if t <= switch {
                (0.5 * t * t, t)
            } else {
                let tau = t - switch;
                (0.5 + tau - 0.5 * tau * tau, 1.0 - tau)
            };
            assert!(
                (x[0] - pos).abs() < 1e-10 && (x[1] - vel).abs() < 1e-10,
                "t = {t}: got ({}, {}), expected ({pos}, {vel})",
                x[0],
                x[1]
            );
        }
    }

    #[test]
    fn state_spline_endpoints_and_tangency() {
        let sol = exact_di_solution(4, 1.0);
        let x0 = sol.eval_state(0.0).unwrap();
        assert_eq!(x0, vec![0.0, 0.0]);
        let xf = sol.eval_state(sol.t_f_star).unwrap();
        assert!((xf[0] - 1.0).abs() < 1e-9 && xf[1].abs() < 1e-9);
        // derivative at grid points equals the vector field there
        for k in 0..4usize {
            let t = k as f64 * sol.dt_star;
            let dx = sol.state.deriv_clamped(t);
            let x = sol.state.eval_clamped(t);
            let u = sol.control.eval_clamped(t);
            let f = sol.spec.model.eval(&x, &u).unwrap();
            for c in 0..2 {
                assert!(
                    (dx[c] - f[c]).abs() < 1e-10,
                    "tangent mismatch at t = {t}, component {c}"
                );
            }
        }
    }

    #[test]
    fn out_of_range_evaluation_is_rejected() {
        let sol = exact_di_solution(4, 1.0);
        assert!(matches!(
            sol.eval_control(-0.1),
            Err(TrajectoryError::OutOfRange { .. })
        ));
        assert!(matches!(
            sol.eval_state(sol.t_f_star + 0.1),
            Err(TrajectoryError::OutOfRange { .. })
        ));
    }

    #[test]
    fn dynamics_error_vanishes_on_exact_arc() {
        let sol = exact_di_solution(4, 1.0);
        let profile = dynamics_error(&sol, &PropagatorConfig::default(), 200).unwrap();
        assert!(
            profile.total() <= 1e-8,
            "error integral {} on an exact arc",
            profile.total()
        );
        assert!(profile.terminal_mismatch <= 1e-8);
    }

    #[test]
    fn zero_duration_solution_has_zero_error() {
        let mut spec = OcpSpec::new(
            double_integrator(),
            vec![0.0, 0.0],
            TargetSpec::fixed(&[0.0, 0.0]),
            Bounds::symmetric(1, 1.0),
            3,
        );
        spec.param = ControlParam::Constant;
        let layout = layout_variables(&spec);
        let z = vec![0.0; layout.n_z()];
        let res = fabricated_result(z, 0.0);
        let sol = Solution::from_decision(spec, res).unwrap();
        assert_eq!(sol.t_f_star, 0.0);
        let profile = dynamics_error(&sol, &PropagatorConfig::default(), 50).unwrap();
        assert_eq!(profile.total(), 0.0);
        assert_eq!(sol.eval_state(0.0).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn constant_variant_never_violates_control_box() {
        let sol = exact_di_solution(4, 1.0);
        let records = violation_profile(&sol, 25);
        for r in records.iter().filter(|r| r.label.starts_with('u')) {
            assert_eq!(r.max_violation, 0.0, "{}: {}", r.label, r.max_violation);
        }
    }

    #[test]
    fn total_variation_counts_switches() {
        let constant = spline(ControlParam::Constant, 1.0, 3, vec![0.7, 0.7, 0.7]);
        let sol = exact_di_solution(4, 1.0);
        let mut flat = sol.clone();
        flat.control = constant;
        let tv = total_variation(&flat, 20);
        assert_eq!(tv[0], 0.0, "constant control has zero variation");

        let tv = total_variation(&sol, 20);
        assert!(
            (tv[0] - 2.0).abs() < 1e-12,
            "one bang-bang switch from 1 to -1 has variation 2, got {}",
            tv[0]
        );
    }

    #[test]
    fn csv_export_has_header_and_rows() {
        let sol = exact_di_solution(4, 1.0);
        let mut buf = Vec::new();
        write_samples_csv(&sol, 10, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert_eq!(header, "t,x1,x2,u1,viol_u1_lower,viol_u1_upper");
        assert_eq!(lines.count(), 4 * 10 + 1);
        assert!(!text.contains(','.to_string().repeat(2).as_str()));
    }

    proptest! {
        #[test]
        fn quadratic_spline_reproduces_midpoint_knots(
            u0 in -2.0..2.0f64,
            um in -2.0..2.0f64,
            u1 in -2.0..2.0f64,
            dt in 0.05..2.0f64,
        ) {
            let s = spline(ControlParam::Quadratic, dt, 1, vec![u0, um, u1]);
            let at_mid = s.eval_clamped(dt / 2.0)[0];
            prop_assert!((at_mid - um).abs() < 1e-12);
            let at_end = s.eval_clamped(dt)[0];
            prop_assert!((at_end - u1).abs() < 1e-11);
        }
    }
}
