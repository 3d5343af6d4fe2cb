//! Solve the CSTR MPC problem at one initial state and check the KKT
//! certificate of the result.

use cgmpc::ocp::{build_nlp, rollout_cost, OcpSpec};
use cgmpc::solver::{certify, solve, SolverConfig};
use cgmpc::Error;

fn main() -> cgmpc::Result<()> {
    let spec = OcpSpec::cstr_benchmark();
    let cfg = SolverConfig::default();
    println!("setpoint x_sp = {:?}, u_e = {:.6}", spec.x_sp, spec.u_e[0]);

    for x0 in [[0.1632, 0.6519], [0.2132, 0.7519], spec.x_sp.clone().try_into().unwrap()] {
        let nlp = build_nlp(&spec, &x0)?;
        let (kkt, status) = solve(&nlp, &spec.lqr_plan(&x0)?, &cfg);
        if !status.succeeded() {
            return Err(Error::Numerical(format!("{x0:?}: {:?} ({})", status.flag, status.message)));
        }
        let (j, traj) = rollout_cost(&kkt.w_star, &x0, &spec)?;
        println!(
            "x0 = {x0:?}: u*(0) = {:.6}, J* = {:.6e} after {} iterations",
            kkt.w_star[0], kkt.j_star, status.iterations
        );
        println!(
            "    KKT residual {:.1e}, {} active rows, certified {}, x(N) = [{:.4}, {:.4}], rollout J = {j:.6e}",
            kkt.kkt_residual,
            kkt.active_set.len(),
            certify(&nlp, &kkt, &cfg)?,
            traj.states[spec.horizon][0],
            traj.states[spec.horizon][1],
        );
    }
    Ok(())
}
