use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pmbm_cli::{
    compare_reports, configure_workers, load_config, parse_variants, run_command, save_config,
    Variant,
};
use pmbm_core::scenario::RunConfig;

#[derive(Parser)]
#[command(
    name = "pmbm",
    about = "Multi-target tracking benchmarks: PMBM filters with clustering and Bernoulli merging"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run Monte-Carlo batches of the configured filter variants and write
    /// per-scan CSVs plus a summary.json into the output directory.
    Run {
        /// Configuration file (TOML). Flags below override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scenario preset: 1 (grouped crossings) or 2 (births and deaths).
        #[arg(long)]
        scenario: Option<u8>,
        /// Simulation index within the scenario (1..=4).
        #[arg(long = "n-sim")]
        n_sim: Option<usize>,
        /// Number of Monte-Carlo runs.
        #[arg(long, default_value_t = 1)]
        mc: usize,
        /// Master seed; all run streams derive from it.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of time steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Comma-separated filter variants to execute.
        #[arg(long, default_value = "clustered-pmbm")]
        filters: Vec<String>,
        /// Output directory for the report files.
        #[arg(long, default_value = "reports")]
        out: PathBuf,
        /// Write the effective configuration next to the reports.
        #[arg(long, default_value_t = true)]
        write_config: bool,
    },
    /// Compare summary reports side by side.
    Compare {
        /// Two or more summary.json paths.
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        /// Emit machine-readable CSV instead of the table.
        #[arg(long)]
        csv: bool,
    },
}

fn main() -> ExitCode {
    // Die quietly when the output pipe closes (e.g. piping into head).
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    configure_workers();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Run {
            config,
            scenario,
            n_sim,
            mc,
            seed,
            steps,
            filters,
            out,
            write_config,
        } => {
            let from_file = config.is_some();
            let mut cfg: RunConfig = match config {
                Some(path) => load_config(&path)?,
                None => RunConfig::preset(scenario.unwrap_or(1), n_sim.unwrap_or(1))?,
            };
            // Flag overrides on top of the file.
            if from_file {
                if let (Some(s), Some(n)) = (scenario, n_sim) {
                    let preset = RunConfig::preset(s, n)?;
                    cfg.scenario = preset.scenario;
                    cfg.n_sim = preset.n_sim;
                    cfg.n_g = preset.n_g;
                    cfg.n_b = preset.n_b;
                    cfg.d_a = preset.d_a;
                    cfg.lambda_c = preset.lambda_c;
                    cfg.q = preset.q;
                }
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let variants: Vec<Variant> = parse_variants(&filters)?;
            let summary = run_command(&cfg, &variants, mc, &out)?;
            if write_config {
                save_config(&out.join("config.toml"), &cfg)?;
            }
            println!(
                "wrote {} variant report(s) to {}",
                summary.variants.len(),
                out.display()
            );
            Ok(())
        }
        Command::Compare { reports, csv } => {
            let table = compare_reports(&reports, csv)?;
            print!("{table}");
            Ok(())
        }
    }
}
