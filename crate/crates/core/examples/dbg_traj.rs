use tocol_core::solver::{SolverResult, SolverStatus};
use tocol_core::systems::*;
use tocol_core::trajectory::*;
use tocol_core::transcription::*;

fn main() {
    let n = 4usize;
    let d: f64 = 1.0;
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
            (0.5 * switch * switch + switch * tau - 0.5 * tau * tau, switch - tau)
        };
        z[layout.x_grid(k)] = pos;
        z[layout.x_grid(k) + 1] = vel;
    }
    for k in 0..n {
        z[layout.u_grid(k)] = if (k as f64 + 0.5) * dt < switch { 1.0 } else { -1.0 };
    }
    let res = SolverResult {
        z, status: SolverStatus::Optimal, kkt_residual: 0.0, constraint_violation: 0.0,
        cost: t_f, iterations: 0, inner_iterations: 0, function_evals: 0,
        eq_multipliers: vec![], ineq_multipliers: vec![], outer_trace: vec![],
    };
    let sol = Solution::from_decision(spec.clone(), res).unwrap();
    // control signal checks
    for t in [0.0, 0.49, 0.5, 0.99, 1.0, 1.01, 1.5, 2.0] {
        println!("u({t}) = {:?}, u_left({t}) = {:?}", sol.control.eval_clamped(t), sol.control.eval_left_clamped(t));
    }
    let bps = {
        use tocol_core::systems::ControlSignal;
        sol.control.breakpoints(t_f)
    };
    println!("breakpoints: {bps:?}");
    let traj = propagate(&spec.model, &spec.x_start, &sol.control, t_f, &PropagatorConfig::default()).unwrap();
    println!("final plant state {:?}", traj.final_state());
    for i in 0..=20 {
        let t = t_f * i as f64 / 20.0;
        let xs = sol.state.eval_clamped(t);
        let xp = traj.sample(t);
        println!("t {:5.2}  spline ({:+.6}, {:+.6})  plant ({:+.6}, {:+.6})  diff {:.2e}",
            t, xs[0], xs[1], xp[0], xp[1],
            ((xs[0]-xp[0]).powi(2) + (xs[1]-xp[1]).powi(2)).sqrt());
    }
}
