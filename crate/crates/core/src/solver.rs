//! General-purpose smooth constrained NLP solver.
//!
//! Problems carry equality constraints, inequality constraints (`g(z) <= 0`
//! convention), and per-variable boxes. The solver runs an augmented
//! Lagrangian outer loop: inequalities are turned into equalities with
//! bound-constrained slack variables, multipliers follow first-order
//! updates, and the penalty grows only when feasibility progress stalls.
//! The inner bound-constrained subproblems are minimized by a projected
//! L-BFGS iteration with a backtracking line search, so variable boxes are
//! satisfied exactly at every iterate. Derivatives come from forward finite
//! differences compressed by greedy column coloring of the declared
//! sparsity pattern. Everything is deterministic for fixed inputs.

use std::collections::VecDeque;
use std::fmt;
use std::sync::Arc;

const DEFAULT_FD_STEP: f64 = 1e-7;
const LBFGS_MEMORY: usize = 10;
const MULTIPLIER_CAP: f64 = 1e12;
const PENALTY_CAP: f64 = 1e16;

/// Structural nonzero positions of a constraint Jacobian.
///
/// Entries are stored sorted by `(row, col)`. Pairs not listed are treated
/// as identically zero by the finite-difference machinery.
#[derive(Debug, Clone)]
pub struct SparsityPattern {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize)>,
}

impl SparsityPattern {
    pub fn new(rows: usize, cols: usize, mut entries: Vec<(usize, usize)>) -> Self {
        entries.sort_unstable();
        entries.dedup();
        for &(r, c) in &entries {
            assert!(r < rows && c < cols, "entry ({r}, {c}) out of range");
        }
        SparsityPattern {
            rows,
            cols,
            entries,
        }
    }

    pub fn dense(rows: usize, cols: usize) -> Self {
        let mut entries = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                entries.push((r, c));
            }
        }
        SparsityPattern {
            rows,
            cols,
            entries,
        }
    }

    pub fn empty(cols: usize) -> Self {
        SparsityPattern {
            rows: 0,
            cols,
            entries: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.entries.binary_search(&(row, col)).is_ok()
    }

    /// Row support per column.
    pub fn column_support(&self) -> Vec<Vec<usize>> {
        let mut support = vec![Vec::new(); self.cols];
        for &(r, c) in &self.entries {
            support[c].push(r);
        }
        support
    }

    /// Greedy grouping of columns with pairwise-disjoint row support; all
    /// columns in one group share a single finite-difference perturbation.
    pub fn color_columns(&self) -> Vec<Vec<usize>> {
        let support = self.column_support();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut occupied: Vec<Vec<bool>> = Vec::new();
        for col in 0..self.cols {
            if support[col].is_empty() {
                continue;
            }
            let slot = (0..groups.len())
                .find(|&g| support[col].iter().all(|&r| !occupied[g][r]));
            let g = match slot {
                Some(g) => g,
                None => {
                    groups.push(Vec::new());
                    occupied.push(vec![false; self.rows]);
                    groups.len() - 1
                }
            };
            groups[g].push(col);
            for &r in &support[col] {
                occupied[g][r] = true;
            }
        }
        groups
    }
}

/// Jacobian values aligned with a [`SparsityPattern`]'s entry order.
#[derive(Debug, Clone)]
pub struct SparseJacobian {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize)>,
    values: Vec<f64>,
}

impl SparseJacobian {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        match self.entries.binary_search(&(row, col)) {
            Ok(i) => self.values[i],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut dense = vec![vec![0.0; self.cols]; self.rows];
        for (&(r, c), &v) in self.entries.iter().zip(&self.values) {
            dense[r][c] = v;
        }
        dense
    }

    /// `J^T y`.
    pub fn transpose_apply(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (&(r, c), &v) in self.entries.iter().zip(&self.values) {
            out[c] += v * y[r];
        }
        out
    }
}

/// Forward-difference Jacobian on the declared pattern with one
/// perturbation per color group. `base` must be the constraint value at `z`.
pub fn fd_jacobian_grouped<F>(
    con: F,
    z: &[f64],
    base: &[f64],
    pattern: &SparsityPattern,
    groups: &[Vec<usize>],
    fd_step: f64,
) -> SparseJacobian
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    assert_eq!(z.len(), pattern.cols(), "point length mismatch");
    assert_eq!(base.len(), pattern.rows(), "base value length mismatch");
    let mut values = vec![0.0; pattern.entries.len()];
    // per-column (row, entry index) lookup
    let mut col_entries: Vec<Vec<(usize, usize)>> = vec![Vec::new(); pattern.cols];
    for (idx, &(r, c)) in pattern.entries.iter().enumerate() {
        col_entries[c].push((r, idx));
    }
    let mut zp = z.to_vec();
    for group in groups {
        for &c in group {
            zp[c] += fd_step * (1.0 + z[c].abs());
        }
        let pert = con(&zp);
        for &c in group {
            let h = fd_step * (1.0 + z[c].abs());
            for &(r, idx) in &col_entries[c] {
                values[idx] = (pert[r] - base[r]) / h;
            }
            zp[c] = z[c];
        }
    }
    SparseJacobian {
        rows: pattern.rows,
        cols: pattern.cols,
        entries: pattern.entries.clone(),
        values,
    }
}

/// Convenience wrapper around [`fd_jacobian_grouped`] that evaluates the
/// base point and colors the pattern itself.
pub fn fd_jacobian<F>(con: F, z: &[f64], pattern: &SparsityPattern, fd_step: f64) -> SparseJacobian
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let base = con(z);
    let groups = pattern.color_columns();
    fd_jacobian_grouped(con, z, &base, pattern, &groups, fd_step)
}

type ScalarFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type VectorFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// A box-, equality-, and inequality-constrained smooth program.
///
/// Constraint closures must return a vector of the declared length; a NaN
/// entry marks the point as outside the evaluable domain and is rejected by
/// the line search rather than propagated.
pub struct NlpProblem {
    pub n: usize,
    pub m_eq: usize,
    pub m_ineq: usize,
    pub cost: Arc<ScalarFn>,
    /// Analytic cost gradient; finite differences are used when absent.
    pub cost_grad: Option<Arc<VectorFn>>,
    pub eq_con: Arc<VectorFn>,
    /// Inequalities in the `g(z) <= 0` convention.
    pub ineq_con: Arc<VectorFn>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub eq_sparsity: SparsityPattern,
    pub ineq_sparsity: SparsityPattern,
}

impl fmt::Debug for NlpProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NlpProblem")
            .field("n", &self.n)
            .field("m_eq", &self.m_eq)
            .field("m_ineq", &self.m_ineq)
            .finish()
    }
}

impl NlpProblem {
    /// Unconstrained, unbounded problem over `n` variables; attach
    /// constraints and bounds by mutating the public fields.
    pub fn unconstrained<C>(n: usize, cost: C) -> Self
    where
        C: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        NlpProblem {
            n,
            m_eq: 0,
            m_ineq: 0,
            cost: Arc::new(cost),
            cost_grad: None,
            eq_con: Arc::new(|_| Vec::new()),
            ineq_con: Arc::new(|_| Vec::new()),
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
            eq_sparsity: SparsityPattern::empty(n),
            ineq_sparsity: SparsityPattern::empty(n),
        }
    }

    fn check_shape(&self) {
        assert_eq!(self.lower.len(), self.n);
        assert_eq!(self.upper.len(), self.n);
        assert_eq!(self.eq_sparsity.rows(), self.m_eq);
        assert_eq!(self.eq_sparsity.cols(), self.n);
        assert_eq!(self.ineq_sparsity.rows(), self.m_ineq);
        assert_eq!(self.ineq_sparsity.cols(), self.n);
        for i in 0..self.n {
            assert!(
                self.lower[i] <= self.upper[i],
                "variable {i} has lower bound above upper bound"
            );
        }
    }
}

/// Augmented-Lagrangian tuning knobs.
#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    pub kkt_tol: f64,
    pub constraint_tol: f64,
    pub max_outer_iters: usize,
    pub max_inner_iters: usize,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    /// Relative finite-difference step; per variable the perturbation is
    /// `fd_step * (1 + |z_i|)`.
    pub fd_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            kkt_tol: 1e-6,
            constraint_tol: 1e-6,
            max_outer_iters: 50,
            max_inner_iters: 200,
            penalty_init: 10.0,
            penalty_growth: 10.0,
            fd_step: DEFAULT_FD_STEP,
        }
    }
}

impl SolverConfig {
    fn validate(&self) {
        assert!(self.kkt_tol > 0.0);
        assert!(self.constraint_tol > 0.0);
        assert!(self.max_outer_iters >= 1);
        assert!(self.max_inner_iters >= 1);
        assert!(self.penalty_init > 0.0);
        assert!(self.penalty_growth > 1.0);
        assert!(self.fd_step > 0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverStatus {
    Optimal,
    MaxIters,
    Infeasible,
    NumericalFailure,
}

impl fmt::Display for SolverStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SolverStatus::Optimal => "optimal",
            SolverStatus::MaxIters => "max-iters",
            SolverStatus::Infeasible => "infeasible",
            SolverStatus::NumericalFailure => "numerical-failure",
        };
        f.write_str(s)
    }
}

/// One outer iteration's diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct OuterRecord {
    pub violation: f64,
    pub penalty: f64,
    pub kkt: f64,
    pub cost: f64,
}

/// Solve outcome: best iterate plus convergence diagnostics.
#[derive(Debug, Clone)]
pub struct SolverResult {
    pub z: Vec<f64>,
    pub status: SolverStatus,
    /// Max of projected stationarity and complementarity residuals.
    pub kkt_residual: f64,
    /// Infinity norm of equality residuals and positive inequality parts.
    pub constraint_violation: f64,
    pub cost: f64,
    /// Outer (multiplier update) iterations.
    pub iterations: usize,
    pub inner_iterations: usize,
    /// Total cost/constraint closure invocations.
    pub function_evals: usize,
    pub eq_multipliers: Vec<f64>,
    pub ineq_multipliers: Vec<f64>,
    pub outer_trace: Vec<OuterRecord>,
}

fn project(w: &mut [f64], lower: &[f64], upper: &[f64]) {
    for i in 0..w.len() {
        w[i] = w[i].clamp(lower[i], upper[i]);
    }
}

fn projected_gradient_norm(w: &[f64], grad: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..w.len() {
        let stepped = (w[i] - grad[i]).clamp(lower[i], upper[i]);
        worst = worst.max((w[i] - stepped).abs());
    }
    worst
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn fd_cost_grad(nlp: &NlpProblem, z: &[f64], f0: f64, fd_step: f64, evals: &mut usize) -> Vec<f64> {
    let mut grad = vec![0.0; nlp.n];
    let mut zp = z.to_vec();
    for i in 0..nlp.n {
        let h = fd_step * (1.0 + z[i].abs());
        zp[i] += h;
        *evals += 1;
        grad[i] = ((nlp.cost)(&zp) - f0) / h;
        zp[i] = z[i];
    }
    grad
}

/// Raw first-order optimality measure at `(z, multipliers)`: the max of
/// projected stationarity of the Lagrangian over the variable box,
/// complementarity `|min(mu_i, -g_i)|`, and primal feasibility.
pub fn kkt_residual(
    nlp: &NlpProblem,
    z: &[f64],
    eq_multipliers: &[f64],
    ineq_multipliers: &[f64],
) -> f64 {
    assert_eq!(z.len(), nlp.n);
    assert_eq!(eq_multipliers.len(), nlp.m_eq);
    assert_eq!(ineq_multipliers.len(), nlp.m_ineq);
    assert!(ineq_multipliers.iter().all(|&m| m >= 0.0));
    let mut evals = 0usize;
    let f0 = (nlp.cost)(z);
    let mut grad_l = match &nlp.cost_grad {
        Some(g) => g(z),
        None => fd_cost_grad(nlp, z, f0, DEFAULT_FD_STEP, &mut evals),
    };
    let c = (nlp.eq_con)(z);
    let g = (nlp.ineq_con)(z);
    if nlp.m_eq > 0 {
        let je = fd_jacobian(|w| (nlp.eq_con)(w), z, &nlp.eq_sparsity, DEFAULT_FD_STEP);
        let jtl = je.transpose_apply(eq_multipliers);
        for i in 0..nlp.n {
            grad_l[i] += jtl[i];
        }
    }
    if nlp.m_ineq > 0 {
        let jg = fd_jacobian(|w| (nlp.ineq_con)(w), z, &nlp.ineq_sparsity, DEFAULT_FD_STEP);
        let jtm = jg.transpose_apply(ineq_multipliers);
        for i in 0..nlp.n {
            grad_l[i] += jtm[i];
        }
    }
    let stationarity = projected_gradient_norm(z, &grad_l, &nlp.lower, &nlp.upper);
    let mut comp: f64 = 0.0;
    let mut feas: f64 = 0.0;
    for (&mu, &gi) in ineq_multipliers.iter().zip(&g) {
        comp = comp.max(mu.min(-gi).abs());
        feas = feas.max(gi.max(0.0));
    }
    for &ci in &c {
        feas = feas.max(ci.abs());
    }
    stationarity.max(comp).max(feas)
}

struct AlContext<'a> {
    nlp: &'a NlpProblem,
    lam: Vec<f64>,
    mu: Vec<f64>,
    rho: f64,
    /// Objective normalization: the augmented Lagrangian uses
    /// `obj_scale * cost` so the cost gradient is O(1) at the start point
    /// and cannot steamroll the early, weakly-penalized feasibility terms.
    obj_scale: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
    eq_groups: Vec<Vec<usize>>,
    ineq_groups: Vec<Vec<usize>>,
    fd_step: f64,
}

struct AlPoint {
    value: f64,
    cost: f64,
    c: Vec<f64>,
    g: Vec<f64>,
}

impl<'a> AlContext<'a> {
    fn n(&self) -> usize {
        self.nlp.n
    }

    /// Augmented Lagrangian at `w = [z; s]`; +inf when the point is outside
    /// the evaluable domain.
    fn value(&self, w: &[f64], evals: &mut usize) -> AlPoint {
        let z = &w[..self.n()];
        let s = &w[self.n()..];
        *evals += 2;
        let cost = (self.nlp.cost)(z);
        let c = (self.nlp.eq_con)(z);
        let g = (self.nlp.ineq_con)(z);
        let mut total = self.obj_scale * cost;
        let finite =
            cost.is_finite() && c.iter().all(|v| v.is_finite()) && g.iter().all(|v| v.is_finite());
        if !finite {
            return AlPoint {
                value: f64::INFINITY,
                cost,
                c,
                g,
            };
        }
        for (i, &ci) in c.iter().enumerate() {
            total += self.lam[i] * ci + 0.5 * self.rho * ci * ci;
        }
        for (i, &gi) in g.iter().enumerate() {
            let r = gi + s[i];
            total += self.mu[i] * r + 0.5 * self.rho * r * r;
        }
        AlPoint {
            value: total,
            cost,
            c,
            g,
        }
    }

    fn gradient(&self, w: &[f64], point: &AlPoint, evals: &mut usize) -> Vec<f64> {
        let n = self.n();
        let z = &w[..n];
        let s = &w[n..];
        let mut grad = vec![0.0; w.len()];
        let cg = match &self.nlp.cost_grad {
            Some(g) => g(z),
            None => fd_cost_grad(self.nlp, z, point.cost, self.fd_step, evals),
        };
        for i in 0..n {
            grad[i] = self.obj_scale * cg[i];
        }
        if self.nlp.m_eq > 0 {
            *evals += self.eq_groups.len();
            let je = fd_jacobian_grouped(
                |p| (self.nlp.eq_con)(p),
                z,
                &point.c,
                &self.nlp.eq_sparsity,
                &self.eq_groups,
                self.fd_step,
            );
            let y: Vec<f64> = point
                .c
                .iter()
                .enumerate()
                .map(|(i, &ci)| self.lam[i] + self.rho * ci)
                .collect();
            let jty = je.transpose_apply(&y);
            for i in 0..n {
                grad[i] += jty[i];
            }
        }
        if self.nlp.m_ineq > 0 {
            *evals += self.ineq_groups.len();
            let jg = fd_jacobian_grouped(
                |p| (self.nlp.ineq_con)(p),
                z,
                &point.g,
                &self.nlp.ineq_sparsity,
                &self.ineq_groups,
                self.fd_step,
            );
            let y: Vec<f64> = point
                .g
                .iter()
                .enumerate()
                .map(|(i, &gi)| self.mu[i] + self.rho * (gi + s[i]))
                .collect();
            let jty = jg.transpose_apply(&y);
            for i in 0..n {
                grad[i] += jty[i];
            }
            for i in 0..self.nlp.m_ineq {
                grad[n + i] = self.mu[i] + self.rho * (point.g[i] + s[i]);
            }
        }
        grad
    }
}

struct InnerOutcome {
    point: AlPoint,
    grad: Vec<f64>,
    iterations: usize,
}

/// Projected L-BFGS on the augmented Lagrangian; every iterate satisfies
/// the bounds exactly.
fn minimize_inner(
    ctx: &AlContext<'_>,
    w: &mut Vec<f64>,
    omega: f64,
    max_iters: usize,
    evals: &mut usize,
) -> InnerOutcome {
    project(w, &ctx.lower, &ctx.upper);
    let mut point = ctx.value(w, evals);
    let mut grad = ctx.gradient(w, &point, evals);
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let dim = w.len();
    let mut iterations = 0usize;

    for _ in 0..max_iters {
        let pg = projected_gradient_norm(w, &grad, &ctx.lower, &ctx.upper);
        if pg <= omega {
            break;
        }
        iterations += 1;

        // freeze variables pinned at a bound with an outward-pushing gradient
        let mut masked = grad.clone();
        for i in 0..dim {
            let at_lower = w[i] <= ctx.lower[i] && grad[i] > 0.0;
            let at_upper = w[i] >= ctx.upper[i] && grad[i] < 0.0;
            if at_lower || at_upper {
                masked[i] = 0.0;
            }
        }

        let mut dir = two_loop(&memory, &masked);
        for d in dir.iter_mut() {
            *d = -*d;
        }
        for i in 0..dim {
            if masked[i] == 0.0 && grad[i] != 0.0 {
                dir[i] = 0.0;
            }
        }
        if dot(&dir, &grad) >= -1e-14 * norm2(&dir) * norm2(&grad) {
            memory.clear();
            dir = masked.iter().map(|g| -g).collect();
        }

        let mut accepted = false;
        let mut alpha = 1.0;
        for _ in 0..50 {
            let mut wt: Vec<f64> = w.iter().zip(&dir).map(|(wi, di)| wi + alpha * di).collect();
            project(&mut wt, &ctx.lower, &ctx.upper);
            let delta: Vec<f64> = wt.iter().zip(w.iter()).map(|(a, b)| a - b).collect();
            let step_len = norm2(&delta);
            if step_len == 0.0 {
                break;
            }
            let pred = dot(&grad, &delta);
            let trial = ctx.value(&wt, evals);
            let sufficient = if pred < 0.0 {
                trial.value <= point.value + 1e-4 * pred
            } else {
                trial.value < point.value
            };
            if sufficient && trial.value.is_finite() {
                let grad_new = ctx.gradient(&wt, &trial, evals);
                let y: Vec<f64> = grad_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
                let sy = dot(&delta, &y);
                if sy > 1e-10 * step_len * norm2(&y) {
                    if memory.len() == LBFGS_MEMORY {
                        memory.pop_front();
                    }
                    memory.push_back((delta, y, sy));
                }
                *w = wt;
                point = trial;
                grad = grad_new;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }

        if !accepted {
            if memory.is_empty() {
                break; // stalled: no descent available at line-search resolution
            }
            memory.clear();
        }
    }

    InnerOutcome {
        point,
        grad,
        iterations,
    }
}

fn two_loop(memory: &VecDeque<(Vec<f64>, Vec<f64>, f64)>, grad: &[f64]) -> Vec<f64> {
    let mut q = grad.to_vec();
    if memory.is_empty() {
        return q;
    }
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, sy) in memory.iter().rev() {
        let a = dot(s, &q) / sy;
        for i in 0..q.len() {
            q[i] -= a * y[i];
        }
        alphas.push(a);
    }
    let (_, y_last, sy_last) = memory.back().unwrap();
    let gamma = sy_last / dot(y_last, y_last).max(1e-300);
    for qi in q.iter_mut() {
        *qi *= gamma;
    }
    for ((s, y, sy), a) in memory.iter().zip(alphas.into_iter().rev()) {
        let b = dot(y, &q) / sy;
        for i in 0..q.len() {
            q[i] += (a - b) * s[i];
        }
    }
    q
}

fn violation_of(c: &[f64], g: &[f64]) -> f64 {
    let mut v: f64 = 0.0;
    for &ci in c {
        v = v.max(ci.abs());
    }
    for &gi in g {
        v = v.max(gi.max(0.0));
    }
    v
}

/// Minimizes `nlp` starting from `z0` (clipped into the variable box).
///
/// Deterministic: identical inputs and configuration produce identical
/// iterate sequences and results.
pub fn solve(nlp: &NlpProblem, z0: &[f64], cfg: &SolverConfig) -> SolverResult {
    solve_warm(
        nlp,
        z0,
        &vec![0.0; nlp.m_eq],
        &vec![0.0; nlp.m_ineq],
        cfg,
    )
}

/// [`solve`] with initial multiplier estimates, e.g. carried over from a
/// closely related problem. Inequality multipliers are clipped to be
/// non-negative.
pub fn solve_warm(
    nlp: &NlpProblem,
    z0: &[f64],
    eq_multipliers0: &[f64],
    ineq_multipliers0: &[f64],
    cfg: &SolverConfig,
) -> SolverResult {
    cfg.validate();
    nlp.check_shape();
    assert_eq!(z0.len(), nlp.n, "initial point length mismatch");
    assert_eq!(eq_multipliers0.len(), nlp.m_eq);
    assert_eq!(ineq_multipliers0.len(), nlp.m_ineq);

    let n = nlp.n;
    let mi = nlp.m_ineq;
    let mut evals = 0usize;

    let mut z = z0.to_vec();
    project(&mut z, &nlp.lower, &nlp.upper);
    evals += 3;
    let f0 = (nlp.cost)(&z);
    let c0 = (nlp.eq_con)(&z);
    let g0 = (nlp.ineq_con)(&z);
    assert_eq!(c0.len(), nlp.m_eq, "eq_con returned wrong length");
    assert_eq!(g0.len(), nlp.m_ineq, "ineq_con returned wrong length");
    if !f0.is_finite()
        || c0.iter().any(|v| !v.is_finite())
        || g0.iter().any(|v| !v.is_finite())
    {
        return SolverResult {
            z,
            status: SolverStatus::NumericalFailure,
            kkt_residual: f64::INFINITY,
            constraint_violation: f64::INFINITY,
            cost: f0,
            iterations: 0,
            inner_iterations: 0,
            function_evals: evals,
            eq_multipliers: vec![0.0; nlp.m_eq],
            ineq_multipliers: vec![0.0; mi],
            outer_trace: Vec::new(),
        };
    }

    let eq_groups = nlp.eq_sparsity.color_columns();
    let ineq_groups = nlp.ineq_sparsity.color_columns();

    // normalize the objective so its gradient is O(1) at the start; the
    // multipliers live in the scaled space and are unscaled on return
    let cg0 = match &nlp.cost_grad {
        Some(g) => g(&z),
        None => fd_cost_grad(nlp, &z, f0, cfg.fd_step, &mut evals),
    };
    let obj_scale = 1.0 / cg0.iter().fold(1.0_f64, |m, v| m.max(v.abs()));

    let mut lam: Vec<f64> = eq_multipliers0
        .iter()
        .map(|&v| (obj_scale * v).clamp(-MULTIPLIER_CAP, MULTIPLIER_CAP))
        .collect();
    let mut mu: Vec<f64> = ineq_multipliers0
        .iter()
        .map(|&v| (obj_scale * v).clamp(0.0, MULTIPLIER_CAP))
        .collect();
    let mut rho = cfg.penalty_init;

    // stacked variable [z; s] with slack bounds s >= 0; slacks start at
    // their closed-form optimum for the initial multipliers
    let mut w = Vec::with_capacity(n + mi);
    w.extend_from_slice(&z);
    w.extend(
        g0.iter()
            .zip(&mu)
            .map(|(&gi, &mi_)| (-gi - mi_ / rho).max(0.0)),
    );
    let mut lower = nlp.lower.clone();
    lower.extend(std::iter::repeat(0.0).take(mi));
    let mut upper = nlp.upper.clone();
    upper.extend(std::iter::repeat(f64::INFINITY).take(mi));
    let mut omega = 1e-2_f64.max(cfg.kkt_tol);
    let mut v_prev = f64::INFINITY;
    let mut stagnant = 0usize;
    let mut trace = Vec::new();
    let mut inner_total = 0usize;

    let mut best_w = w.clone();
    let mut best_cost = f0;
    let mut best_violation = violation_of(&c0, &g0);
    let mut best_kkt = f64::INFINITY;
    let mut best_lam = lam.clone();
    let mut best_mu = mu.clone();

    let mut status = SolverStatus::MaxIters;
    let mut outer_done = 0usize;

    for outer in 0..cfg.max_outer_iters {
        outer_done = outer + 1;
        let ctx = AlContext {
            nlp,
            lam: lam.clone(),
            mu: mu.clone(),
            rho,
            obj_scale,
            lower: lower.clone(),
            upper: upper.clone(),
            eq_groups: eq_groups.clone(),
            ineq_groups: ineq_groups.clone(),
            fd_step: cfg.fd_step,
        };
        let outcome = minimize_inner(&ctx, &mut w, omega, cfg.max_inner_iters, &mut evals);
        inner_total += outcome.iterations;

        let v = violation_of(&outcome.point.c, &outcome.point.g);

        for (i, &ci) in outcome.point.c.iter().enumerate() {
            lam[i] = (lam[i] + rho * ci).clamp(-MULTIPLIER_CAP, MULTIPLIER_CAP);
        }
        for i in 0..mi {
            let r = outcome.point.g[i] + w[n + i];
            mu[i] = (mu[i] + rho * r).clamp(0.0, MULTIPLIER_CAP);
        }

        // stationarity over the z block; with the first-order update the AL
        // gradient in z equals the Lagrangian gradient at the new multipliers
        let pg_z = projected_gradient_norm(&w[..n], &outcome.grad[..n], &nlp.lower, &nlp.upper);
        let mut comp: f64 = 0.0;
        for (i, &gi) in outcome.point.g.iter().enumerate() {
            comp = comp.max(mu[i].min(-gi).abs());
        }
        let kkt = pg_z.max(comp);

        trace.push(OuterRecord {
            violation: v,
            penalty: rho,
            kkt,
            cost: outcome.point.cost,
        });

        let better = if v <= cfg.constraint_tol && best_violation <= cfg.constraint_tol {
            outcome.point.cost < best_cost
        } else {
            v < best_violation
        };
        if better {
            best_w = w.clone();
            best_cost = outcome.point.cost;
            best_violation = v;
            best_kkt = kkt;
            best_lam = lam.clone();
            best_mu = mu.clone();
        }

        if v <= cfg.constraint_tol && kkt <= cfg.kkt_tol {
            status = SolverStatus::Optimal;
            best_w = w.clone();
            best_cost = outcome.point.cost;
            best_violation = v;
            best_kkt = kkt;
            best_lam = lam.clone();
            best_mu = mu.clone();
            break;
        }

        if v > 0.5 * v_prev && v > cfg.constraint_tol {
            rho = (rho * cfg.penalty_growth).min(PENALTY_CAP);
            stagnant = if v > 0.9 * v_prev { stagnant + 1 } else { 0 };
        } else {
            stagnant = 0;
        }
        if rho >= 1e12
            && v > cfg.constraint_tol
            && stagnant >= 3
            && best_violation > cfg.constraint_tol
        {
            status = SolverStatus::Infeasible;
            break;
        }

        omega = (omega * 0.2).max(0.3 * cfg.kkt_tol);
        v_prev = v;
    }

    SolverResult {
        z: best_w[..n].to_vec(),
        status,
        kkt_residual: best_kkt,
        constraint_violation: best_violation,
        cost: best_cost,
        iterations: outer_done,
        inner_iterations: inner_total,
        function_evals: evals,
        eq_multipliers: best_lam.iter().map(|v| v / obj_scale).collect(),
        ineq_multipliers: best_mu.iter().map(|v| v / obj_scale).collect(),
        outer_trace: trace,
    }
}
