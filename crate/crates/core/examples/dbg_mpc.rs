use tocol_core::mpc::*;
use tocol_core::solver::SolverConfig;
use tocol_core::systems::*;
use tocol_core::transcription::*;
use tocol_core::solve_ocp;

fn main() {
    // cost-bound sampling pieces
    let mut template = OcpSpec::new(
        double_integrator(),
        vec![1.0, 0.0],
        TargetSpec::fixed(&[0.0, 0.0]),
        Bounds::symmetric(1, 1.0),
        30,
    );
    template.dt_min = 0.0;
    for d in [0.25f64, 1.0, 4.0, 0.0] {
        let mut spec = template.clone();
        spec.x_start = vec![d, 0.0];
        let sol = solve_ocp(&spec, &SolverConfig::default()).unwrap();
        println!(
            "d={d}: status {:?} t_f* {:.6} (expect {:.3}) viol {:.2e} kkt {:.2e} outers {} inner {}",
            sol.solver.status, sol.t_f_star, 2.0 * d.sqrt(),
            sol.solver.constraint_violation, sol.solver.kkt_residual,
            sol.solver.iterations, sol.solver.inner_iterations
        );
        for (i, r) in sol.solver.outer_trace.iter().enumerate() {
            if i < 14 {
                println!("   outer {i:2}: v {:.2e}  rho {:.1e}  kkt {:.2e} cost {:.4}", r.violation, r.penalty, r.kkt, r.cost);
            }
        }
    }

    // vdp closed loop
    let template = OcpSpec::new(
        vdp(),
        vec![0.0, 0.0],
        TargetSpec::fixed(&[0.8, 0.0]),
        Bounds::symmetric(1, 1.0),
        8,
    );
    let mut cfg = MpcConfig::new(8, 3);
    cfg.convergence_radius = 0.05;
    cfg.dt_min = 1e-3;
    let log = run_closed_loop(&[0.0, 0.0], &vdp(), &template, &cfg).unwrap();
    println!("loop status {:?} steps {} final {:?}", log.status, log.records.len(), log.final_state);
    for r in &log.records {
        println!(
            "  n {:2} t {:.4} x ({:+.4}, {:+.4}) N {} dt* {:.5} t_f* {:.5} {:?}",
            r.n, r.t, r.state[0], r.state[1], r.horizon, r.dt_star, r.t_f_star, r.solver_status
        );
    }
}
