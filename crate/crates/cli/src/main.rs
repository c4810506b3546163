use clap::{Args, Parser, Subcommand};
use fbsde_cli::commands::{cmd_check, cmd_compare, cmd_solve, config_failure, EXIT_OK};
use fbsde_cli::config::{load_config_with, Overrides};
use fbsde_cli::registry;
use std::path::PathBuf;
use std::process::ExitCode;

/// Monotone Picard solver for coupled FBSDEs with diagonally quadratic
/// generators.
#[derive(Parser)]
#[command(name = "fbsde", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one problem and write history, norms, residuals and reports.
    Solve(RunArgs),
    /// Solve two ordered problems on shared noise and compare them.
    Compare(RunArgs),
    /// Probe the structural assumptions of a problem.
    Check(RunArgs),
    /// List the built-in models and their parameters.
    Models,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    config: PathBuf,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    no_projection: bool,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            paths: self.paths,
            steps: self.steps,
            seed: self.seed,
            tol: self.tol,
            max_iter: self.max_iter,
            output_dir: self.output_dir.clone(),
            no_projection: self.no_projection,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args, cmd): (&str, &RunArgs, fn(&_) -> i32) = match &cli.command {
        Command::Solve(a) => ("solve", a, cmd_solve),
        Command::Compare(a) => ("compare", a, cmd_compare),
        Command::Check(a) => ("check", a, cmd_check),
        Command::Models => {
            for name in registry::NAMES {
                let params = registry::defaults(name).expect("listed model");
                let params: Vec<String> = params.iter().map(|(k, v)| format!("{k}={v}")).collect();
                println!("{name}: {}", registry::describe(name).unwrap_or_default());
                println!("    parameters: {}", params.join(", "));
            }
            return ExitCode::from(EXIT_OK as u8);
        }
    };
    let code = match load_config_with(&args.config, &args.overrides()) {
        Ok(exp) => cmd(&exp),
        Err(e) => config_failure(name, &e, args.output_dir.as_deref()),
    };
    ExitCode::from(code as u8)
}
