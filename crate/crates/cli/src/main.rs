use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sharesim_cli::{
    cmd_check_atomics, cmd_compare_filters, cmd_gen, cmd_run, cmd_sweep, parse_sizes, CliError,
    DEFAULT_SWEEP_SIZES,
};

/// Discrete-event simulator for memory sharing on a multi-headed CXL device.
#[derive(Parser)]
#[command(name = "sharesim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation; writes metrics.json and trace.csv.
    Run {
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Exit with status 3 when any protocol violation occurred.
        #[arg(long)]
        strict: bool,
    },
    /// Run the workload under precise, imprecise and hybrid filters; writes filters.csv.
    CompareFilters {
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run the workload at several lock region sizes; writes sweep.csv.
    Sweep {
        config: PathBuf,
        /// Comma-separated powers of two, e.g. 64,4096,2MiB,64MiB.
        #[arg(long)]
        sizes: Option<String>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Generate a workload trace from a TOML generator spec.
    Gen {
        spec: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Exhaustively check two-port TAS/CAS interleavings.
    CheckAtomics {
        /// Longest per-port program.
        #[arg(long, default_value_t = 3)]
        max_len: usize,
    },
}

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Run {
            config,
            out,
            strict,
        } => cmd_run(&config, &out, strict),
        Command::CompareFilters { config, out } => cmd_compare_filters(&config, &out),
        Command::Sweep { config, sizes, out } => {
            let sizes = match sizes {
                Some(text) => parse_sizes(&text)?,
                None => DEFAULT_SWEEP_SIZES.to_vec(),
            };
            cmd_sweep(&config, &sizes, &out)
        }
        Command::Gen { spec, out } => cmd_gen(&spec, &out),
        Command::CheckAtomics { max_len } => cmd_check_atomics(max_len).map(|(_, code)| code),
    }
}

fn main() -> ExitCode {
    let code = match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("sharesim: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
