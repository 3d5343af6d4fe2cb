//! Build a certified dataset on a coarse state grid, save it as JSON lines
//! and read it back.

use cgmpc::dataset::{generate_logged, Dataset, GenerationConfig, GridSpec};
use cgmpc::ocp::OcpSpec;

fn main() -> cgmpc::Result<()> {
    let spec = OcpSpec::cstr_benchmark();
    let grid = GridSpec::state_box(&spec, 0.1)?;
    let cfg = GenerationConfig::default();
    let (dataset, stats) = generate_logged(&spec, &grid, &cfg)?;
    println!(
        "kept {} of {} grid points in {:.1} s ({} cold restarts), gamma = {:.4e}",
        stats.n_kept, stats.n_attempted, stats.wall_time_s, stats.cold_restarts, stats.gamma
    );
    println!("outcomes: {:?}", stats.outcomes);

    let v = dataset.verify(&spec)?;
    println!(
        "re-verified: max KKT residual {:.1e}, max violation {:.1e}, passes {}",
        v.max_kkt_residual,
        v.max_violation,
        v.passes(&cfg.solver)
    );

    let path = std::env::temp_dir().join("cgmpc_example_dataset.jsonl");
    dataset.save(&path)?;
    let back = Dataset::load(&path)?;
    assert_eq!(back.digest(), dataset.digest());
    println!("saved to {} (sha256 {})", path.display(), &dataset.digest()[..16]);
    Ok(())
}
