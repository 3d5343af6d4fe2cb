//! Lagrangian curvature in the first input at a KKT point, and how well
//! the quadratic model `½ Δuᵀ L_uu Δu` predicts the true Lagrangian change.

use cgmpc::ocp::{build_nlp, OcpSpec};
use cgmpc::sensitivity::{delta_lagrangian, reduced_hessian, ReductionMode};
use cgmpc::solver::{solve, SolverConfig};
use cgmpc::Error;

fn main() -> cgmpc::Result<()> {
    let spec = OcpSpec::cstr_benchmark();
    let cfg = SolverConfig::default();
    let x0 = [0.2132, 0.6519];
    let nlp = build_nlp(&spec, &x0)?;
    let (kkt, status) = solve(&nlp, &spec.lqr_plan(&x0)?, &cfg);
    if !status.succeeded() {
        return Err(Error::Numerical(status.message));
    }
    let rec = reduced_hessian(&nlp, &kkt, spec.n_u(), ReductionMode::Direct, &cfg)?;
    println!("u* = {:.6}, L_uu = {:.4e}, active rows {:?}", kkt.w_star[0], rec.l_uu[0], rec.active_set);

    println!("{:>10} {:>14} {:>14} {:>12}", "du", "dL", "model", "error");
    for du in [1e-3, 1e-4, 1e-5, 1e-6, 1e-7] {
        let dl = delta_lagrangian(&nlp, &kkt.w_star, &kkt.lambda, &kkt.mu, &[kkt.w_star[0] + du])?;
        let model = rec.model_gap(&[du]);
        println!("{du:>10.1e} {dl:>14.6e} {model:>14.6e} {:>12.3e}", (dl - model).abs());
    }
    // the error falls roughly with the cube of du until it reaches round-off
    Ok(())
}
