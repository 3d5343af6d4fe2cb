//! Train the same network under the three losses on a small dataset and
//! print the bound certificate of each.

use cgmpc::dataset::{generate, GenerationConfig, GridSpec};
use cgmpc::ocp::OcpSpec;
use cgmpc::policy::Normalization;
use cgmpc::training::{certify_policy, loss_lag, loss_mse, loss_w, problems_for, train, LossKind, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cgmpc::Result<()> {
    // a shorter horizon keeps the example quick
    let spec = OcpSpec {
        horizon: 40,
        ..OcpSpec::cstr_benchmark()
    };
    let dataset = generate(&spec, &GridSpec::state_box(&spec, 0.1)?, &GenerationConfig::default())?;
    let problems = problems_for(&spec, &dataset)?;
    let norm = Normalization::from_boxes(&spec.x_lo, &spec.x_hi, &spec.u_lo, &spec.u_hi)?;
    let cfg = TrainConfig {
        iterations: 800,
        ..TrainConfig::default()
    };
    println!("{} samples, gamma = {:.4e}", dataset.samples.len(), dataset.gamma);

    for kind in LossKind::ALL {
        let out = train(&dataset, kind, &cfg, &norm, &problems)?;
        let p = &out.policy;
        println!(
            "{kind:>3}: {:.3e} -> {:.3e} in {:.1} s | L_mse {:.3e}, L_w {:.3e}, L_lag {:.3e}",
            out.initial_loss(),
            out.final_loss(),
            out.wall_time_s,
            loss_mse(p, &dataset)?,
            loss_w(p, &dataset)?,
            loss_lag(p, &dataset, &problems)?
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (cert, _) = certify_policy(p, &dataset, &problems, 0.05, 20, &mut rng)?;
        println!(
            "     L_lag {:.3e} <= {:.3e} ({}), gamma L_w {:.3e} <= {:.3e} ({})",
            cert.l_lag,
            cert.lag_bound,
            cert.lag_holds,
            cert.gamma * cert.l_w,
            cert.w_bound,
            cert.w_holds
        );
    }
    Ok(())
}
