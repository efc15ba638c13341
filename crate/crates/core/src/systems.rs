//! Dynamic-system abstraction, benchmark models, and ODE propagation.
//!
//! [`SystemModel`] packages the vector field `f(x, u)` of a continuous-time,
//! time-invariant system together with its dimensions and optional analytic
//! partial derivatives. [`propagate`] realizes the associated solution map
//! with a fixed-step RK4 or adaptive RK45 integrator and serves as the
//! ground truth that collocated trajectories are measured against.

use std::fmt;
use std::sync::Arc;

/// Vector field signature: `(x, u) -> dx/dt`.
pub type DynamicsFn = dyn Fn(&[f64], &[f64]) -> Result<Vec<f64>, SystemError> + Send + Sync;

/// Analytic partial-derivative signature: `(x, u) -> matrix` (row per state equation).
pub type JacobianFn = dyn Fn(&[f64], &[f64]) -> Result<Vec<Vec<f64>>, SystemError> + Send + Sync;

/// Errors raised when evaluating a system model.
#[derive(Debug, Clone, PartialEq)]
pub enum SystemError {
    /// An input slice had the wrong length.
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    /// The dynamics are undefined at the requested point.
    Domain(String),
}

impl fmt::Display for SystemError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SystemError::DimensionMismatch {
                what,
                expected,
                got,
            } => write!(f, "{what}: expected length {expected}, got {got}"),
            SystemError::Domain(msg) => write!(f, "dynamics domain error: {msg}"),
        }
    }
}

impl std::error::Error for SystemError {}

/// A continuous-time, time-invariant system `dx/dt = f(x, u)` with state
/// dimension `p` and control dimension `q`.
///
/// Models are immutable after construction and cheap to clone (the vector
/// field is shared behind an `Arc`), so they can be handed to concurrent
/// workers freely.
#[derive(Clone)]
pub struct SystemModel {
    name: String,
    p: usize,
    q: usize,
    f: Arc<DynamicsFn>,
    jac_x: Option<Arc<JacobianFn>>,
    jac_u: Option<Arc<JacobianFn>>,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("name", &self.name)
            .field("p", &self.p)
            .field("q", &self.q)
            .field("analytic_jacobians", &self.jac_x.is_some())
            .finish()
    }
}

impl SystemModel {
    /// Wraps a vector field. The closure must return a vector of length `p`
    /// for inputs of lengths `p` and `q`; [`SystemModel::eval`] enforces this.
    pub fn new<F>(name: impl Into<String>, p: usize, q: usize, f: F) -> Self
    where
        F: Fn(&[f64], &[f64]) -> Result<Vec<f64>, SystemError> + Send + Sync + 'static,
    {
        assert!(p > 0 && q > 0, "state and control dimensions must be positive");
        SystemModel {
            name: name.into(),
            p,
            q,
            f: Arc::new(f),
            jac_x: None,
            jac_u: None,
        }
    }

    /// Attaches analytic partials of `f` with respect to state and control.
    pub fn with_jacobians<Jx, Ju>(mut self, jac_x: Jx, jac_u: Ju) -> Self
    where
        Jx: Fn(&[f64], &[f64]) -> Result<Vec<Vec<f64>>, SystemError> + Send + Sync + 'static,
        Ju: Fn(&[f64], &[f64]) -> Result<Vec<Vec<f64>>, SystemError> + Send + Sync + 'static,
    {
        self.jac_x = Some(Arc::new(jac_x));
        self.jac_u = Some(Arc::new(jac_u));
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// State dimension `p`.
    pub fn state_dim(&self) -> usize {
        self.p
    }

    /// Control dimension `q`.
    pub fn control_dim(&self) -> usize {
        self.q
    }

    pub fn has_analytic_jacobians(&self) -> bool {
        self.jac_x.is_some() && self.jac_u.is_some()
    }

    /// Evaluates the vector field `f(x, u)`.
    pub fn eval(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, SystemError> {
        if x.len() != self.p {
            return Err(SystemError::DimensionMismatch {
                what: "state",
                expected: self.p,
                got: x.len(),
            });
        }
        if u.len() != self.q {
            return Err(SystemError::DimensionMismatch {
                what: "control",
                expected: self.q,
                got: u.len(),
            });
        }
        let dx = (self.f)(x, u)?;
        if dx.len() != self.p {
            return Err(SystemError::DimensionMismatch {
                what: "state derivative",
                expected: self.p,
                got: dx.len(),
            });
        }
        Ok(dx)
    }

    /// Analytic `df/dx` if the model carries one.
    pub fn jac_x(&self, x: &[f64], u: &[f64]) -> Option<Result<Vec<Vec<f64>>, SystemError>> {
        self.jac_x.as_ref().map(|j| j(x, u))
    }

    /// Analytic `df/du` if the model carries one.
    pub fn jac_u(&self, x: &[f64], u: &[f64]) -> Option<Result<Vec<Vec<f64>>, SystemError>> {
        self.jac_u.as_ref().map(|j| j(x, u))
    }
}

/// Largest relative deviation between the model's analytic partials and a
/// central finite difference of `f` at `(x, u)`. Returns `None` when the
/// model has no analytic Jacobians.
pub fn max_jacobian_deviation(
    model: &SystemModel,
    x: &[f64],
    u: &[f64],
) -> Result<Option<f64>, SystemError> {
    if !model.has_analytic_jacobians() {
        return Ok(None);
    }
    let p = model.state_dim();
    let q = model.control_dim();
    let h = 1e-6;
    let mut worst: f64 = 0.0;

    let ax = model.jac_x(x, u).unwrap()?;
    for j in 0..p {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        let step = h * (1.0 + x[j].abs());
        xp[j] += step;
        xm[j] -= step;
        let fp = model.eval(&xp, u)?;
        let fm = model.eval(&xm, u)?;
        for i in 0..p {
            let fd = (fp[i] - fm[i]) / (2.0 * step);
            let dev = (ax[i][j] - fd).abs() / (1.0 + ax[i][j].abs());
            worst = worst.max(dev);
        }
    }

    let au = model.jac_u(x, u).unwrap()?;
    for j in 0..q {
        let mut up = u.to_vec();
        let mut um = u.to_vec();
        let step = h * (1.0 + u[j].abs());
        up[j] += step;
        um[j] -= step;
        let fp = model.eval(x, &up)?;
        let fm = model.eval(x, &um)?;
        for i in 0..p {
            let fd = (fp[i] - fm[i]) / (2.0 * step);
            let dev = (au[i][j] - fd).abs() / (1.0 + au[i][j].abs());
            worst = worst.max(dev);
        }
    }
    Ok(Some(worst))
}

/// Van der Pol oscillator: `dx1 = x2`, `dx2 = (1 - x1^2) x2 - x1 + u`.
pub fn vdp() -> SystemModel {
    vdp_with_damping(1.0)
}

/// Van der Pol oscillator with the nonlinear damping term scaled by `scale`,
/// used for plant-model mismatch studies.
pub fn vdp_with_damping(scale: f64) -> SystemModel {
    SystemModel::new("vdp", 2, 1, move |x, u| {
        Ok(vec![x[1], scale * (1.0 - x[0] * x[0]) * x[1] - x[0] + u[0]])
    })
    .with_jacobians(
        move |x, _u| {
            Ok(vec![
                vec![0.0, 1.0],
                vec![-2.0 * scale * x[0] * x[1] - 1.0, scale * (1.0 - x[0] * x[0])],
            ])
        },
        |_x, _u| Ok(vec![vec![0.0], vec![1.0]]),
    )
}

/// Mass below which rocket dynamics are rejected as singular.
pub const ROCKET_MIN_MASS: f64 = 1e-12;

/// Free-space rocket with state `(s, v, m)`:
/// `ds = v`, `dv = (u - 0.02 v^2) / m`, `dm = -0.01 u^2`.
pub fn rocket() -> SystemModel {
    rocket_with_drag(1.0)
}

/// Rocket with the drag coefficient scaled by `scale` (mismatch studies).
///
/// Evaluation rejects `m <= 1e-12` instead of clamping, so trajectories
/// entering the singular-mass region fail loudly.
pub fn rocket_with_drag(scale: f64) -> SystemModel {
    let drag = 0.02 * scale;
    SystemModel::new("rocket", 3, 1, move |x, u| {
        let m = x[2];
        if m <= ROCKET_MIN_MASS {
            return Err(SystemError::Domain(format!(
                "rocket mass {m} is at or below the singular threshold"
            )));
        }
        Ok(vec![
            x[1],
            (u[0] - drag * x[1] * x[1]) / m,
            -0.01 * u[0] * u[0],
        ])
    })
    .with_jacobians(
        move |x, u| {
            let m = x[2];
            if m <= ROCKET_MIN_MASS {
                return Err(SystemError::Domain(format!(
                    "rocket mass {m} is at or below the singular threshold"
                )));
            }
            Ok(vec![
                vec![0.0, 1.0, 0.0],
                vec![
                    0.0,
                    -2.0 * drag * x[1] / m,
                    -(u[0] - drag * x[1] * x[1]) / (m * m),
                ],
                vec![0.0, 0.0, 0.0],
            ])
        },
        move |x, u| {
            let m = x[2];
            if m <= ROCKET_MIN_MASS {
                return Err(SystemError::Domain(format!(
                    "rocket mass {m} is at or below the singular threshold"
                )));
            }
            Ok(vec![vec![0.0], vec![1.0 / m], vec![-0.02 * u[0]]])
        },
    )
}

/// Double integrator `dx1 = x2`, `dx2 = u`; its rest-to-rest minimum time
/// over distance `d` with `|u| <= 1` is `2 sqrt(d)`, which makes it the
/// analytic oracle for the optimizer tests.
pub fn double_integrator() -> SystemModel {
    double_integrator_with_gain(1.0)
}

/// Double integrator with a scaled control gain (mismatch studies).
pub fn double_integrator_with_gain(gain: f64) -> SystemModel {
    SystemModel::new("double_integrator", 2, 1, move |x, u| {
        Ok(vec![x[1], gain * u[0]])
    })
    .with_jacobians(
        |_x, _u| Ok(vec![vec![0.0, 1.0], vec![0.0, 0.0]]),
        move |_x, _u| Ok(vec![vec![0.0], vec![gain]]),
    )
}

/// A control trajectory `u(t)` that an integrator can sample.
///
/// Signals are evaluated right-continuously at breakpoints. `breakpoints`
/// lets the integrator split at discontinuities or derivative kinks, and
/// `eval_left` supplies the left limit used when a step lands exactly on a
/// breakpoint from below.
pub trait ControlSignal: Sync {
    fn eval(&self, t: f64) -> Vec<f64>;

    /// Left limit at `t`; identical to `eval` for continuous signals.
    fn eval_left(&self, t: f64) -> Vec<f64> {
        self.eval(t)
    }

    /// Interior times in `(0, t_end)` where the signal is non-smooth.
    fn breakpoints(&self, _t_end: f64) -> Vec<f64> {
        Vec::new()
    }
}

impl<F> ControlSignal for F
where
    F: Fn(f64) -> Vec<f64> + Sync,
{
    fn eval(&self, t: f64) -> Vec<f64> {
        self(t)
    }
}

/// Piecewise-constant signal: `values[i]` holds on `[switch_times[i-1], switch_times[i])`.
#[derive(Debug, Clone)]
pub struct PiecewiseConstant {
    switch_times: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl PiecewiseConstant {
    /// `switch_times` must be strictly increasing and one shorter than `values`.
    pub fn new(switch_times: Vec<f64>, values: Vec<Vec<f64>>) -> Self {
        assert_eq!(values.len(), switch_times.len() + 1);
        assert!(switch_times.windows(2).all(|w| w[0] < w[1]));
        PiecewiseConstant {
            switch_times,
            values,
        }
    }
}

impl ControlSignal for PiecewiseConstant {
    fn eval(&self, t: f64) -> Vec<f64> {
        let idx = self.switch_times.iter().filter(|&&s| t >= s).count();
        self.values[idx].clone()
    }

    fn eval_left(&self, t: f64) -> Vec<f64> {
        let idx = self.switch_times.iter().filter(|&&s| t > s).count();
        self.values[idx].clone()
    }

    fn breakpoints(&self, t_end: f64) -> Vec<f64> {
        self.switch_times
            .iter()
            .copied()
            .filter(|&s| s > 0.0 && s < t_end)
            .collect()
    }
}

/// Integration scheme for [`propagate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PropagatorMethod {
    /// Classic fourth-order Runge-Kutta with the given fixed step.
    Rk4Fixed { step: f64 },
    /// Dormand-Prince 5(4) with adaptive step control.
    Rk45Adaptive,
}

/// Tolerances and limits for the ODE propagator.
#[derive(Debug, Clone, Copy)]
pub struct PropagatorConfig {
    pub method: PropagatorMethod,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_steps: usize,
}

impl Default for PropagatorConfig {
    fn default() -> Self {
        PropagatorConfig {
            method: PropagatorMethod::Rk45Adaptive,
            abs_tol: 1e-9,
            rel_tol: 1e-9,
            max_steps: 1_000_000,
        }
    }
}

impl PropagatorConfig {
    pub fn validate(&self) -> Result<(), PropagationError> {
        if !(self.abs_tol > 0.0) || !(self.rel_tol > 0.0) {
            return Err(PropagationError::InvalidInput(
                "tolerances must be strictly positive".into(),
            ));
        }
        if self.max_steps < 1 {
            return Err(PropagationError::InvalidInput(
                "max_steps must be at least 1".into(),
            ));
        }
        if let PropagatorMethod::Rk4Fixed { step } = self.method {
            if !(step > 0.0) {
                return Err(PropagationError::InvalidInput(
                    "fixed step must be strictly positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Errors raised by [`propagate`]; each carries the last valid time.
#[derive(Debug, Clone)]
pub enum PropagationError {
    /// The step budget was exhausted before reaching the end time.
    StepLimit { t: f64 },
    /// The error controller demanded a step below the representable floor.
    StepSizeUnderflow { t: f64 },
    /// A state or derivative became non-finite.
    NonFinite { t: f64 },
    /// The model rejected an evaluation.
    System { t: f64, source: SystemError },
    InvalidInput(String),
}

impl fmt::Display for PropagationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PropagationError::StepLimit { t } => {
                write!(f, "step budget exhausted at t = {t}")
            }
            PropagationError::StepSizeUnderflow { t } => {
                write!(f, "step size underflow at t = {t}")
            }
            PropagationError::NonFinite { t } => {
                write!(f, "non-finite state or derivative at t = {t}")
            }
            PropagationError::System { t, source } => {
                write!(f, "dynamics evaluation failed at t = {t}: {source}")
            }
            PropagationError::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
        }
    }
}

impl std::error::Error for PropagationError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            PropagationError::System { source, .. } => Some(source),
            _ => None,
        }
    }
}

/// A propagated trajectory sampled at every accepted integrator step.
///
/// Derivatives are stored alongside states so [`Trajectory::sample`] can
/// interpolate with a cubic Hermite segment between records.
#[derive(Debug, Clone)]
pub struct Trajectory {
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
    derivs: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory has at least one record")
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one record")
    }

    /// Cubic Hermite interpolation between stored records; `t` is clamped
    /// to the recorded span.
    pub fn sample(&self, t: f64) -> Vec<f64> {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.states[0].clone();
        }
        if t >= self.times[n - 1] {
            return self.states[n - 1].clone();
        }
        // partition_point returns the first index with times[i] > t
        let hi = self.times.partition_point(|&tk| tk <= t);
        let (i, j) = (hi - 1, hi);
        let h = self.times[j] - self.times[i];
        if h <= 0.0 {
            return self.states[i].clone();
        }
        let s = (t - self.times[i]) / h;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 1.0 - 3.0 * s2 + 2.0 * s3;
        let h10 = s - 2.0 * s2 + s3;
        let h01 = 3.0 * s2 - 2.0 * s3;
        let h11 = -s2 + s3;
        (0..self.states[i].len())
            .map(|c| {
                h00 * self.states[i][c]
                    + h10 * h * self.derivs[i][c]
                    + h01 * self.states[j][c]
                    + h11 * h * self.derivs[j][c]
            })
            .collect()
    }
}

// Dormand-Prince 5(4) tableau.
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Integrates `dx/dt = f(x, u(t))` from `x0` over `[0, t_end]`.
///
/// The time axis is split at the control signal's breakpoints so each
/// integrated segment sees a smooth input; at a segment's right endpoint
/// the signal is sampled by its left limit, which keeps piecewise-constant
/// controls deterministic across partition boundaries.
pub fn propagate(
    model: &SystemModel,
    x0: &[f64],
    control: &dyn ControlSignal,
    t_end: f64,
    cfg: &PropagatorConfig,
) -> Result<Trajectory, PropagationError> {
    cfg.validate()?;
    if !(t_end >= 0.0) {
        return Err(PropagationError::InvalidInput(format!(
            "t_end must be non-negative, got {t_end}"
        )));
    }
    if x0.len() != model.state_dim() {
        return Err(PropagationError::InvalidInput(format!(
            "initial state has length {}, model expects {}",
            x0.len(),
            model.state_dim()
        )));
    }
    if !x0.iter().all(|v| v.is_finite()) {
        return Err(PropagationError::InvalidInput(
            "initial state must be finite".into(),
        ));
    }

    let mut segments = vec![0.0];
    let mut bps: Vec<f64> = control
        .breakpoints(t_end)
        .into_iter()
        .filter(|&s| s > 0.0 && s < t_end)
        .collect();
    bps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for s in bps {
        if s - segments.last().unwrap() > 1e-12 * t_end.max(1.0) {
            segments.push(s);
        }
    }
    if t_end > *segments.last().unwrap() {
        segments.push(t_end);
    }

    let u0 = control.eval(0.0);
    let f0 = model
        .eval(x0, &u0)
        .map_err(|source| PropagationError::System { t: 0.0, source })?;
    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![x0.to_vec()],
        derivs: vec![f0],
    };
    if t_end == 0.0 {
        return Ok(traj);
    }

    let mut x = x0.to_vec();
    let mut steps_used = 0usize;
    for (si, w) in segments.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        if si > 0 {
            // duplicate the breakpoint record with the right-limit
            // derivative so Hermite sampling is correct on both sides of a
            // control discontinuity
            let f_right = eval_rhs(model, control, b, a, &x)?;
            traj.times.push(a);
            traj.states.push(x.clone());
            traj.derivs.push(f_right);
        }
        match cfg.method {
            PropagatorMethod::Rk4Fixed { step } => {
                integrate_rk4(model, control, &mut x, a, b, step, cfg, &mut traj, &mut steps_used)?
            }
            PropagatorMethod::Rk45Adaptive => {
                integrate_rk45(model, control, &mut x, a, b, cfg, &mut traj, &mut steps_used)?
            }
        }
    }
    Ok(traj)
}

fn eval_rhs(
    model: &SystemModel,
    control: &dyn ControlSignal,
    seg_end: f64,
    t: f64,
    x: &[f64],
) -> Result<Vec<f64>, PropagationError> {
    let u = if t >= seg_end {
        control.eval_left(seg_end)
    } else {
        control.eval(t)
    };
    model
        .eval(x, &u)
        .map_err(|source| PropagationError::System { t, source })
}

#[allow(clippy::too_many_arguments)]
fn integrate_rk4(
    model: &SystemModel,
    control: &dyn ControlSignal,
    x: &mut Vec<f64>,
    a: f64,
    b: f64,
    step: f64,
    cfg: &PropagatorConfig,
    traj: &mut Trajectory,
    steps_used: &mut usize,
) -> Result<(), PropagationError> {
    let n_steps = ((b - a) / step).ceil().max(1.0) as usize;
    let h = (b - a) / n_steps as f64;
    let p = x.len();
    for i in 0..n_steps {
        *steps_used += 1;
        if *steps_used > cfg.max_steps {
            return Err(PropagationError::StepLimit { t: a + i as f64 * h });
        }
        let t = a + i as f64 * h;
        let k1 = eval_rhs(model, control, b, t, x)?;
        let x2: Vec<f64> = (0..p).map(|c| x[c] + 0.5 * h * k1[c]).collect();
        let k2 = eval_rhs(model, control, b, t + 0.5 * h, &x2)?;
        let x3: Vec<f64> = (0..p).map(|c| x[c] + 0.5 * h * k2[c]).collect();
        let k3 = eval_rhs(model, control, b, t + 0.5 * h, &x3)?;
        let x4: Vec<f64> = (0..p).map(|c| x[c] + h * k3[c]).collect();
        let k4 = eval_rhs(model, control, b, t + h, &x4)?;
        for c in 0..p {
            x[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
        }
        let t_new = if i + 1 == n_steps { b } else { t + h };
        if !x.iter().all(|v| v.is_finite()) {
            return Err(PropagationError::NonFinite { t: t_new });
        }
        let f_new = eval_rhs(model, control, b, t_new, x)?;
        traj.times.push(t_new);
        traj.states.push(x.clone());
        traj.derivs.push(f_new);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn integrate_rk45(
    model: &SystemModel,
    control: &dyn ControlSignal,
    x: &mut Vec<f64>,
    a: f64,
    b: f64,
    cfg: &PropagatorConfig,
    traj: &mut Trajectory,
    steps_used: &mut usize,
) -> Result<(), PropagationError> {
    let p = x.len();
    let span = b - a;
    let h_floor = 1e-14 * b.abs().max(1.0);
    let mut t = a;
    let mut h = (span / 16.0).max(h_floor);
    let tiny = 1e-14 * b.abs().max(1.0);

    while t < b - tiny {
        *steps_used += 1;
        if *steps_used > cfg.max_steps {
            return Err(PropagationError::StepLimit { t });
        }
        h = h.min(b - t);

        let mut k: Vec<Vec<f64>> = Vec::with_capacity(7);
        k.push(eval_rhs(model, control, b, t, x)?);
        for s in 1..7 {
            let xs: Vec<f64> = (0..p)
                .map(|c| {
                    let mut acc = x[c];
                    for (j, kj) in k.iter().enumerate() {
                        acc += h * DP_A[s][j] * kj[c];
                    }
                    acc
                })
                .collect();
            k.push(eval_rhs(model, control, b, t + DP_C[s] * h, &xs)?);
        }

        let mut x5 = vec![0.0; p];
        let mut err_rms = 0.0;
        for c in 0..p {
            let mut acc5 = x[c];
            let mut acc4 = x[c];
            for (j, kj) in k.iter().enumerate() {
                acc5 += h * DP_B5[j] * kj[c];
                acc4 += h * DP_B4[j] * kj[c];
            }
            x5[c] = acc5;
            let scale = cfg.abs_tol + cfg.rel_tol * x[c].abs().max(acc5.abs());
            let e = (acc5 - acc4) / scale;
            err_rms += e * e;
        }
        err_rms = (err_rms / p as f64).sqrt();

        if !x5.iter().all(|v| v.is_finite()) || !err_rms.is_finite() {
            return Err(PropagationError::NonFinite { t });
        }

        if err_rms <= 1.0 {
            t += h;
            *x = x5;
            let t_rec = if t >= b - tiny { b } else { t };
            let f_new = eval_rhs(model, control, b, t_rec, x)?;
            traj.times.push(t_rec);
            traj.states.push(x.clone());
            traj.derivs.push(f_new);
        }

        let factor = if err_rms == 0.0 {
            5.0
        } else {
            (0.9 * err_rms.powf(-0.2)).clamp(0.2, 5.0)
        };
        h *= factor;
        if h < h_floor {
            return Err(PropagationError::StepSizeUnderflow { t });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_control(_t: f64) -> Vec<f64> {
        vec![0.0]
    }

    #[test]
    fn vdp_origin_is_steady_state() {
        let m = vdp();
        let dx = m.eval(&[0.0, 0.0], &[0.0]).unwrap();
        assert_eq!(dx, vec![0.0, 0.0]);
    }

    #[test]
    fn vdp_hand_evaluations() {
        let m = vdp();
        assert_eq!(m.eval(&[1.0, 1.0], &[0.0]).unwrap(), vec![1.0, -1.0]);
        assert_eq!(m.eval(&[0.8, 0.0], &[0.0]).unwrap(), vec![0.0, -0.8]);
        assert_eq!(m.eval(&[0.0, 1.0], &[1.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn rocket_hand_evaluations() {
        let m = rocket();
        let dx = m.eval(&[0.0, 1.0, 1.0], &[0.0]).unwrap();
        assert!((dx[0] - 1.0).abs() < 1e-15);
        assert!((dx[1] + 0.02).abs() < 1e-15);
        assert_eq!(dx[2], 0.0);

        let dx = m.eval(&[0.0, 0.0, 2.0], &[1.0]).unwrap();
        assert_eq!(dx, vec![0.0, 0.5, -0.01]);

        let dx = m.eval(&[0.0, 0.0, 1.0], &[1.0]).unwrap();
        assert_eq!(dx, vec![0.0, 1.0, -0.01]);
    }

    #[test]
    fn rocket_rejects_singular_mass() {
        let m = rocket();
        assert!(matches!(
            m.eval(&[0.0, 0.0, 0.0], &[1.0]),
            Err(SystemError::Domain(_))
        ));
    }

    #[test]
    fn double_integrator_hand_evaluations() {
        let m = double_integrator();
        assert_eq!(m.eval(&[0.0, 0.0], &[1.0]).unwrap(), vec![0.0, 1.0]);
        assert_eq!(m.eval(&[3.0, -2.0], &[0.0]).unwrap(), vec![-2.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = vdp();
        assert!(matches!(
            m.eval(&[0.0], &[0.0]),
            Err(SystemError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            m.eval(&[0.0, 0.0], &[0.0, 0.0]),
            Err(SystemError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let x = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let u = [rng.gen_range(-2.0..2.0)];
            let dev = max_jacobian_deviation(&vdp(), &x, &u).unwrap().unwrap();
            assert!(dev < 1e-5, "vdp jacobian deviation {dev}");
            let dev = max_jacobian_deviation(&double_integrator(), &x, &u)
                .unwrap()
                .unwrap();
            assert!(dev < 1e-5, "double integrator jacobian deviation {dev}");
        }
        // rocket samples keep the mass away from the singular region
        for _ in 0..20 {
            let x = [
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.2..2.0),
            ];
            let u = [rng.gen_range(-2.0..2.0)];
            let dev = max_jacobian_deviation(&rocket(), &x, &u).unwrap().unwrap();
            assert!(dev < 1e-5, "rocket jacobian deviation {dev}");
        }
    }

    #[test]
    fn propagate_pure_integrator() {
        let m = SystemModel::new("integrator", 1, 1, |_x, u| Ok(vec![u[0]]));
        let traj = propagate(
            &m,
            &[0.0],
            &|_t: f64| vec![1.0],
            2.0,
            &PropagatorConfig::default(),
        )
        .unwrap();
        assert!((traj.final_state()[0] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn propagate_exponential() {
        let m = SystemModel::new("exp", 1, 1, |x, _u| Ok(vec![x[0]]));
        let traj = propagate(&m, &[1.0], &zero_control, 1.0, &PropagatorConfig::default()).unwrap();
        assert!(
            (traj.final_state()[0] - std::f64::consts::E).abs() < 1e-8,
            "x(1) = {}",
            traj.final_state()[0]
        );
    }

    #[test]
    fn propagate_bang_bang_double_integrator() {
        let control = PiecewiseConstant::new(vec![1.0], vec![vec![1.0], vec![-1.0]]);
        let traj = propagate(
            &double_integrator(),
            &[0.0, 0.0],
            &control,
            2.0,
            &PropagatorConfig::default(),
        )
        .unwrap();
        let xf = traj.final_state();
        assert!((xf[0] - 1.0).abs() < 1e-9, "position {}", xf[0]);
        assert!(xf[1].abs() < 1e-9, "velocity {}", xf[1]);
    }

    #[test]
    fn rk4_exhibits_fourth_order_convergence() {
        // dx = x from x(0) = 1 has the closed form e^t.
        let m = SystemModel::new("exp", 1, 1, |x, _u| Ok(vec![x[0]]));
        let run = |step: f64| {
            let cfg = PropagatorConfig {
                method: PropagatorMethod::Rk4Fixed { step },
                ..Default::default()
            };
            let traj = propagate(&m, &[1.0], &zero_control, 1.0, &cfg).unwrap();
            (traj.final_state()[0] - std::f64::consts::E).abs()
        };
        let e_coarse = run(0.1);
        let e_fine = run(0.05);
        let ratio = e_coarse / e_fine;
        assert!(ratio >= 12.0, "RK4 error ratio {ratio} below 12");
    }

    #[test]
    fn propagation_satisfies_semigroup_property() {
        let m = vdp();
        let u = |_t: f64| vec![0.2];
        let cfg = PropagatorConfig::default();
        let full = propagate(&m, &[0.5, -0.3], &u, 2.0, &cfg).unwrap();
        let half = propagate(&m, &[0.5, -0.3], &u, 1.0, &cfg).unwrap();
        let rest = propagate(&m, half.final_state(), &u, 1.0, &cfg).unwrap();
        for c in 0..2 {
            let diff = (full.final_state()[c] - rest.final_state()[c]).abs();
            assert!(diff < 1e-8, "semigroup mismatch {diff} in component {c}");
        }
    }

    #[test]
    fn propagate_rejects_bad_inputs() {
        let m = vdp();
        assert!(propagate(&m, &[0.0], &zero_control, 1.0, &PropagatorConfig::default()).is_err());
        assert!(propagate(
            &m,
            &[0.0, 0.0],
            &zero_control,
            -1.0,
            &PropagatorConfig::default()
        )
        .is_err());
        let bad = PropagatorConfig {
            abs_tol: 0.0,
            ..Default::default()
        };
        assert!(propagate(&m, &[0.0, 0.0], &zero_control, 1.0, &bad).is_err());
    }

    #[test]
    fn propagate_reports_step_limit() {
        let m = vdp();
        let cfg = PropagatorConfig {
            max_steps: 3,
            ..Default::default()
        };
        match propagate(&m, &[2.0, 0.0], &zero_control, 10.0, &cfg) {
            Err(PropagationError::StepLimit { t }) => assert!(t < 10.0),
            other => panic!("expected step limit, got {other:?}"),
        }
    }

    #[test]
    fn trajectory_sampling_interpolates_records() {
        let m = double_integrator();
        let traj = propagate(
            &m,
            &[0.0, 0.0],
            &|_t: f64| vec![1.0],
            1.0,
            &PropagatorConfig::default(),
        )
        .unwrap();
        // closed form: x1 = t^2/2, x2 = t (quadratic, so Hermite sampling is exact)
        for &t in &[0.1, 0.25, 0.51, 0.77, 0.99] {
            let x = traj.sample(t);
            assert!((x[0] - 0.5 * t * t).abs() < 1e-10);
            assert!((x[1] - t).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_duration_propagation() {
        let m = vdp();
        let traj = propagate(&m, &[0.3, 0.4], &zero_control, 0.0, &PropagatorConfig::default())
            .unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj.final_state(), &[0.3, 0.4]);
    }
}
