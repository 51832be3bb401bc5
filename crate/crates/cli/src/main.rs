use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use asnpe::simulators::ExternalConfig;
use asnpe_cli::{
    plot, resume_experiment, run_experiment, validate_simulator, CliError, ExperimentConfig,
    RunOptions, RunReport, TaskConfig,
};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "asnpe", version, about = "Active sequential neural posterior estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (method, seed) cell of an experiment.
    Run {
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Stop sequential cells once this many rounds are done.
        #[arg(long)]
        stop_after_round: Option<usize>,
        /// Run cells concurrently.
        #[arg(long)]
        parallel_cells: bool,
    },
    /// Continue an interrupted experiment.
    Resume {
        dir: PathBuf,
        #[arg(long)]
        stop_after_round: Option<usize>,
    },
    /// Write SVG plots for a run directory.
    Plot { dir: PathBuf },
    /// Print the configuration with every default filled in.
    PrintEffectiveConfig {
        /// Without a config, print the defaults for a toy OD experiment.
        config: Option<PathBuf>,
    },
    /// Start an external simulator and round-trip one request.
    ValidateSimulator {
        /// Experiment config with an `external` task.
        #[arg(long, conflicts_with = "command")]
        config: Option<PathBuf>,
        #[arg(long, requires = "x_dim")]
        theta_dim: Option<usize>,
        #[arg(long)]
        x_dim: Option<usize>,
        #[arg(long, default_value_t = 60.0)]
        timeout_s: f64,
        /// Program and arguments, after `--`.
        #[arg(last = true)]
        command: Vec<String>,
    },
    /// Built-in test simulator speaking the JSON-lines protocol on stdin/stdout.
    #[command(hide = true)]
    MockSimulator {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
}

fn report(r: &RunReport) -> Result<(), CliError> {
    if r.already_complete {
        println!("every cell is already complete; nothing to do");
        return Ok(());
    }
    println!("{} cells complete", r.complete.len());
    if !r.incomplete.is_empty() {
        println!("{} cells stopped early; continue with `asnpe resume`", r.incomplete.len());
    }
    for (m, s, e) in &r.failed {
        eprintln!("cell {m} seed {s} failed: {e}");
    }
    if r.failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow::anyhow!("{} cells failed", r.failed.len())))
    }
}

fn default_config() -> ExperimentConfig {
    ExperimentConfig::from_toml("output_dir = \"runs/toy_od\"\n[task]\nkind = \"toy_od\"\n")
        .expect("built-in config is valid")
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            output_dir,
            stop_after_round,
            parallel_cells,
        } => {
            let mut config = ExperimentConfig::load(&config).map_err(CliError::Config)?;
            if let Some(dir) = output_dir {
                config.output_dir = dir;
            }
            config.parallel_cells |= parallel_cells;
            let dir = config.output_dir.clone();
            let r = run_experiment(config, RunOptions { stop_after_round })?;
            println!("run directory: {}", dir.display());
            report(&r)
        }
        Command::Resume { dir, stop_after_round } => report(&resume_experiment(&dir, RunOptions { stop_after_round })?),
        Command::Plot { dir } => {
            for p in plot::emit_plots(&dir).map_err(CliError::Runtime)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::PrintEffectiveConfig { config } => {
            let config = match config {
                Some(p) => ExperimentConfig::load(&p).map_err(CliError::Config)?,
                None => default_config(),
            };
            print!("{}", config.to_toml().map_err(CliError::Config)?);
            Ok(())
        }
        Command::ValidateSimulator {
            config,
            theta_dim,
            x_dim,
            timeout_s,
            command,
        } => {
            let (ext, theta) = match config {
                Some(p) => {
                    let c = ExperimentConfig::load(&p).map_err(CliError::Config)?;
                    match c.task {
                        TaskConfig::External { simulator, prior, .. } => (simulator, Some(prior.mean())),
                        _ => return Err(CliError::Config(anyhow::anyhow!("task in {} is not external", p.display()))),
                    }
                }
                None => {
                    let (Some(t), Some(x)) = (theta_dim, x_dim) else {
                        return Err(CliError::Config(anyhow::anyhow!(
                            "give --config, or --theta-dim, --x-dim and the command after --"
                        )));
                    };
                    if command.is_empty() {
                        return Err(CliError::Config(anyhow::anyhow!("no simulator command given")));
                    }
                    let mut ext = ExternalConfig::new(command, t, x);
                    ext.timeout_s = timeout_s;
                    (ext, None)
                }
            };
            let check = validate_simulator(ext, theta)
                .context("simulator check failed")
                .map_err(CliError::Runtime)?;
            println!("θ = {:?}", check.theta);
            println!("x = {:?}", check.output);
            println!(
                "seeded repeat: {}",
                if check.seeded_repeat { "identical" } else { "differs (runs will not be reproducible)" }
            );
            Ok(())
        }
        Command::MockSimulator { .. } => unreachable!("handled before logging starts"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Command::MockSimulator { args } = &cli.command {
        return ExitCode::from(asnpe::simulators::mock::serve(args.clone()) as u8);
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

