use std::path::PathBuf;
use std::process::ExitCode;

use cgmpc::config::RunConfig;
use cgmpc::pipeline;
use cgmpc::training::LossKind;
use cgmpc::Result;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(version, about = "Cost-guided approximation of nonlinear MPC on the CSTR benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the OCP over the state grid and write the dataset.
    GenData(Common),
    /// Train policies on the dataset (all three losses unless --loss is given).
    Train(Common),
    /// Run MPC and the trained policies in closed loop.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Policy files; defaults to every trained policy in the output directory.
        policies: Vec<PathBuf>,
    },
    /// Tabulate an evaluated run.
    Report(Common),
    /// gen-data, train for every loss, evaluate, report.
    RunAll(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in benchmark defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads, 0 for all cores.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_parser = ["mse", "lag", "w"])]
    loss: Option<String>,
    #[arg(long)]
    scenarios: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    grid_step: Option<f64>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        if let Some(v) = self.scenarios {
            cfg.eval.scenarios = v;
        }
        if let Some(v) = self.steps {
            cfg.eval.steps = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = self.grid_step {
            cfg.grid.step = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn losses(&self) -> Result<Vec<LossKind>> {
        match &self.loss {
            Some(s) => Ok(vec![s.parse()?]),
            None => Ok(LossKind::ALL.to_vec()),
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(c) => {
            let log = pipeline::gen_data(&c.config()?)?;
            println!(
                "kept {} of {} samples, gamma = {:.6e}, {:.1} s",
                log.stats.n_kept, log.stats.n_attempted, log.stats.gamma, log.stats.wall_time_s
            );
        }
        Command::Train(c) => {
            for f in pipeline::train_policies(&c.config()?, &c.losses()?)? {
                let holds = f.certificate.as_ref().is_some_and(|c| c.holds());
                println!("{}: certificate {}", f.provenance.loss, if holds { "holds" } else { "FAILS" });
            }
        }
        Command::Evaluate { common, policies } => {
            let cfg = common.config()?;
            let paths = if policies.is_empty() {
                pipeline::default_policy_paths(&cfg)
            } else {
                policies
            };
            let s = pipeline::evaluate_policies(&cfg, &paths)?;
            for (name, p) in &s.policies {
                println!("{name:>4}: mean J-J* {:.4e}, max {:.4e}", p.mean_excess, p.max_excess);
            }
        }
        Command::Report(c) => print!("{}", pipeline::report(&c.config()?.out)?),
        Command::RunAll(c) => print!("{}", pipeline::run_all(&c.config()?)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
