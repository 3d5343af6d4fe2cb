//! Closed-loop comparison of MPC with a crude approximate policy (a linear
//! state feedback around the setpoint), written out as CSV and SVG.

use cgmpc::closed_loop::{evaluate, write_trajectory_csv, Controller, EvalConfig};
use cgmpc::ocp::OcpSpec;
use cgmpc::plot::{phase_svg, Series};
use cgmpc::policy::{Layer, MlpPolicy, Normalization};
use cgmpc::solver::SolverConfig;

fn main() -> cgmpc::Result<()> {
    let spec = OcpSpec::cstr_benchmark();
    // u = u_e - K (x - x_sp) as a one-layer network on raw coordinates
    let k = spec.lqr_gain()?;
    let bias = spec.u_e[0] + k[0] * spec.x_sp[0] + k[1] * spec.x_sp[1];
    let linear = MlpPolicy {
        layer_sizes: vec![2, 1],
        layers: vec![Layer {
            weights: vec![-k[0], -k[1]],
            biases: vec![bias],
        }],
        normalization: Normalization::identity(2, 1),
    };
    linear.validate()?;

    let controllers = [Controller::Approx {
        name: "lqr".into(),
        policy: linear,
    }];
    let cfg = EvalConfig {
        scenarios: 4,
        steps: 60,
        ..EvalConfig::default()
    };
    let eval = evaluate(&spec, &controllers, &SolverConfig::default(), &cfg)?;
    for (name, s) in &eval.report.summary {
        println!(
            "{name:>4}: mean J-J* {:.4e}, max {:.4e}, clipped {}, violation steps {}",
            s.mean_excess, s.max_excess, s.clipped, s.violation_steps
        );
    }
    println!("{} initial states rejected", eval.report.rejections.len());

    let dir = std::env::temp_dir().join("cgmpc_example_closed_loop");
    std::fs::create_dir_all(&dir).map_err(|e| cgmpc::Error::Numerical(e.to_string()))?;
    let mut f = std::fs::File::create(dir.join("s00_mpc.csv")).map_err(|e| cgmpc::Error::Numerical(e.to_string()))?;
    write_trajectory_csv(&mut f, &eval.rollouts["mpc"][0])?;
    let series: Vec<Series> = eval
        .rollouts
        .iter()
        .map(|(name, runs)| Series {
            label: name,
            trajectories: runs.iter().map(|r| r.states.as_slice()).collect(),
        })
        .collect();
    std::fs::write(dir.join("phase.svg"), phase_svg(&spec, &series, "example"))
        .map_err(|e| cgmpc::Error::Numerical(e.to_string()))?;
    println!("wrote {}", dir.display());
    Ok(())
}
