use tocol_core::solver::{solve, SolverConfig};
use tocol_core::systems::double_integrator;
use tocol_core::transcription::*;

fn main() {
    let mut spec = OcpSpec::new(
        double_integrator(),
        vec![0.0, 0.0],
        TargetSpec::fixed(&[1.0, 0.0]),
        Bounds::symmetric(1, 1.0),
        20,
    );
    spec.param = ControlParam::Constant;
    let nlp = assemble_nlp(&spec).unwrap();
    let z0 = initial_guess(&spec).unwrap();
    let cfg = SolverConfig::default();
    let res = solve(&nlp, &z0, &cfg);
    println!("status {:?} cost {} viol {:.3e} kkt {:.3e} outers {} inners {} evals {}",
        res.status, res.cost, res.constraint_violation, res.kkt_residual,
        res.iterations, res.inner_iterations, res.function_evals);
    for (i, r) in res.outer_trace.iter().enumerate() {
        println!("  outer {i:2}: v {:.3e}  rho {:.1e}  kkt {:.3e}  cost {:.6}", r.violation, r.penalty, r.kkt, r.cost);
    }
    println!("dt = {}", res.z[0]);
}
