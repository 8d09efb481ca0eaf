// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qcclosure_cli::{cmd_run, cmd_scan, CliError, Overrides, ScanSpec};
use qcclosure_core::ModelKind;

/// Mixed quantum-classical trajectory simulations.
#[derive(Parser)]
#[command(name = "qcclosure", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one configuration.
    Run(CommonArgs),
    /// Repeat a run for each value of one parameter.
    Scan {
        #[command(flatten)]
        common: CommonArgs,
        /// Parameter and values, e.g. `alpha=0.25,0.5,1.0` (alpha, N or dt).
        #[arg(long, value_name = "NAME=V1,V2,...")]
        scan: String,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Directory for run.csv, manifest.json and snapshots/.
    #[arg(long, value_name = "PATH")]
    output_dir: PathBuf,
    /// Closure to integrate: ehrenfest, meanfield or regularized.
    #[arg(long, value_name = "NAME")]
    model: Option<ModelKind>,
    /// Override a config entry; dotted paths and the short names alpha, N, dt, t_final are accepted.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Time step.
    #[arg(long)]
    dt: Option<f64>,
    /// Single-threaded run with fixed reduction order.
    #[arg(long)]
    deterministic: bool,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            model: self.model,
            seed: self.seed,
            dt: self.dt,
            deterministic: self.deterministic,
            set: self.set.clone(),
        }
    }
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("{}", e.to_json_line());
    ExitCode::from(e.exit_code())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => match cmd_run(&args.config, &args.output_dir, &args.overrides()) {
            Ok(summary) => {
                println!(
                    "{} run finished at t={}: energy {} (relative drift {:e}), purity {}",
                    summary.model.name(),
                    summary.t_final,
                    summary.energy,
                    summary.relative_energy_drift,
                    summary.purity
                );
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::Scan { common, scan } => {
            let spec = match ScanSpec::parse(&scan) {
                Ok(s) => s,
                Err(e) => return fail(&e),
            };
            match cmd_scan(&common.config, &spec, &common.output_dir, &common.overrides()) {
                Ok(entries) => {
                    let mut code = ExitCode::SUCCESS;
                    for entry in &entries {
                        match &entry.result {
                            Ok(s) => println!("{}={}: ok, purity {}", spec.parameter, entry.value, s.purity),
                            Err(e) => {
                                eprintln!("{}", e.to_json_line());
                                if code == ExitCode::SUCCESS {
                                    code = ExitCode::from(e.exit_code());
                                }
                            }
                        }
                    }
                    code
                }
                Err(e) => fail(&e),
            }
        }
    }
}
