//! Minimum-time trajectory optimization for nonlinear continuous-time
//! systems, built on Hermite-Simpson direct collocation with a variable
//! discretization grid, plus a shrinking-horizon time-optimal MPC loop on
//! top of the open-loop solver.
//!
//! The crate is organized along the pipeline:
//!
//! * [`systems`] — system models, benchmark plants, ODE propagation.
//! * [`transcription`] — problem specs and their sparse NLP form.
//! * [`solver`] — augmented-Lagrangian NLP solver with sparse
//!   finite-difference Jacobians.
//! * [`trajectory`] — spline reconstruction and evaluation metrics.
//! * [`mpc`] — shrinking-horizon closed loop and its diagnostics.

pub mod mpc;
pub mod solver;
pub mod systems;
pub mod transcription;
pub mod trajectory;

pub use solver::{NlpProblem, SolverConfig, SolverResult, SolverStatus, SparsityPattern};
pub use trajectory::TrajectoryError;
pub use systems::{
    ControlSignal, PropagationError, PropagatorConfig, PropagatorMethod, SystemError, SystemModel,
    Trajectory,
};
pub use transcription::{
    Bounds, CollocationForm, ControlParam, DecisionLayout, OcpSpec, PathConstraint, TargetSpec,
    TranscriptionError,
};
pub use trajectory::{ControlSpline, Solution, StateSpline};

/// Solves a minimum-time problem end to end: assemble the NLP, build the
/// straight-line initial guess, minimize, and reconstruct splines.
///
/// The cost `N * dt` pulls straight toward `dt = 0`, and at `dt = 0` the
/// feasibility measure has a first-order plateau (state motion enters the
/// defects only through `dt`), so a cold solve with `dt_min` near zero can
/// collapse the interval before the multipliers form and then stall. The
/// driver therefore solves once with the interval floor raised to a
/// fraction of the heuristic guess; if that floor ends up inactive the
/// result already satisfies the original first-order conditions, otherwise
/// the true bounds are restored and the solve continues warm-started with
/// the stage-one iterate and multipliers.
///
/// The returned [`Solution`] carries whatever status the solver reached;
/// callers decide how to treat non-optimal outcomes.
pub fn solve_ocp(
    spec: &OcpSpec,
    cfg: &SolverConfig,
) -> Result<Solution, trajectory::TrajectoryError> {
    let z0 = transcription::initial_guess(spec)?;
    let dt0 = z0[0];
    let floor = (0.25 * dt0).min(spec.dt_max);
    if spec.dt_min >= floor || !(dt0 > 0.0) {
        let nlp = transcription::assemble_nlp(spec)?;
        let result = solver::solve(&nlp, &z0, cfg);
        return Solution::from_decision(spec.clone(), result);
    }

    let mut staged = spec.clone();
    staged.dt_min = floor;
    let staged_nlp = transcription::assemble_nlp(&staged)?;
    let stage_one = solver::solve(&staged_nlp, &z0, cfg);
    if stage_one.status == SolverStatus::Optimal && stage_one.z[0] > floor * (1.0 + 1e-9) {
        return Solution::from_decision(spec.clone(), stage_one);
    }

    let nlp = transcription::assemble_nlp(spec)?;
    let result = solver::solve_warm(
        &nlp,
        &stage_one.z,
        &stage_one.eq_multipliers,
        &stage_one.ineq_multipliers,
        cfg,
    );
    Solution::from_decision(spec.clone(), result)
}
