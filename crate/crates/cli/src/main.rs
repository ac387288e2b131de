use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use empc_cli::builtin::{self, BUILTINS};
use empc_cli::runner::default_out_dir;
use empc_cli::{diff_artifacts, run, CliError, CliResult, Override, Scenario};

#[derive(Parser)]
#[command(name = "empc", version, about = "Economic MPC and MDP experiments on grid models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory (overrides scenario.output).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Top-level random seed (overrides simulation.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override a scenario key, e.g. `--set mpc.horizon=20`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Skip SVG output.
    #[arg(long, global = true)]
    no_plots: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file or a built-in scenario by name.
    Run { scenario: String },
    /// List built-in scenarios.
    List,
    /// Compare two run directories column by column.
    Diff {
        dir_a: PathBuf,
        dir_b: PathBuf,
        #[arg(long, default_value_t = 1e-9)]
        rel_tol: f64,
    },
}

fn load(name: &str, overrides: &[Override]) -> CliResult<Scenario> {
    let path = Path::new(name);
    if path.exists() {
        Scenario::load(path, overrides)
    } else if builtin::find(name).is_some() {
        builtin::load(name, overrides)
    } else {
        Err(CliError::Config(format!("`{name}` is neither a scenario file nor a built-in scenario")))
    }
}

fn execute(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::List => {
            for b in BUILTINS {
                println!("{:<22} {}", b.name, b.description);
            }
            Ok(())
        }
        Command::Run { scenario } => {
            let mut overrides = cli.set.iter().map(|s| s.parse()).collect::<CliResult<Vec<Override>>>()?;
            if let Some(seed) = cli.seed {
                overrides.push(format!("simulation.seed={seed}").parse()?);
            }
            let sc = load(&scenario, &overrides)?;
            let out = cli.out.unwrap_or_else(|| default_out_dir(&sc));
            let report = run(&sc, &out, !cli.no_plots)?;
            for (k, v) in &report.summary {
                println!("{k} = {v}");
            }
            println!("wrote {} artifacts to {}", report.artifacts.len(), report.dir.display());
            Ok(())
        }
        Command::Diff { dir_a, dir_b, rel_tol } => {
            let report = diff_artifacts(&dir_a, &dir_b, rel_tol)?;
            print!("{}", report.render());
            if report.passed() {
                Ok(())
            } else {
                Err(CliError::Diff(format!("differences exceed rel_tol {rel_tol:e}")))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("empc: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
