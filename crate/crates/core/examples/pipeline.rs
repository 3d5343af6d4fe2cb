//! The whole workflow on a reduced configuration: dataset, three trained
//! policies, closed-loop evaluation and the results table.

use cgmpc::config::RunConfig;
use cgmpc::pipeline::run_all;

fn main() -> cgmpc::Result<()> {
    let mut cfg = RunConfig::from_toml(
        r#"
        [ocp]
        horizon = 40
        [grid]
        step = 0.1
        [train]
        iterations = 300
        [eval]
        scenarios = 4
        steps = 40
        "#,
    )?;
    cfg.out = std::env::temp_dir().join("cgmpc_example_run");
    print!("{}", run_all(&cfg)?);
    println!("\noutputs in {}", cfg.out.display());
    Ok(())
}
