//! On a linear plant with quadratic cost the Lagrangian curvature does not
//! depend on the initial state, so cost-guided weighting reduces to a
//! rescaled squared error.

use cgmpc::ocp::{build_nlp, OcpSpec};
use cgmpc::sensitivity::{reduced_hessian, ReductionMode};
use cgmpc::solver::{solve, SolverConfig};
use cgmpc::Error;

fn main() -> cgmpc::Result<()> {
    let spec = OcpSpec::linear_benchmark(20);
    let cfg = SolverConfig::default();
    for x0 in [[0.5, 0.0], [-1.0, 0.8], [2.0, -1.5], [4.0, 2.0]] {
        let nlp = build_nlp(&spec, &x0)?;
        let (kkt, status) = solve(&nlp, &spec.equilibrium_plan(), &cfg);
        if !status.succeeded() {
            return Err(Error::Numerical(status.message));
        }
        let rec = reduced_hessian(&nlp, &kkt, 1, ReductionMode::Direct, &cfg)?;
        println!(
            "x0 = {x0:>12?}: u*(0) = {:>9.5}, L_uu = {:.10e}, active rows {}",
            kkt.w_star[0],
            rec.l_uu[0],
            rec.active_set.len()
        );
    }
    Ok(())
}
