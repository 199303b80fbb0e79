use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ris_ors::config::{parse_config, CsiMode, SchemeId};
use ris_ors::harness::{sweep, write_plotdata, write_results, write_traces};
use ris_ors::Error;

#[derive(Parser)]
#[command(name = "ris-ors", version, about = "Monte Carlo simulator for opportunistic rate splitting with a RIS")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a sweep over the configured RIS sizes and write a CSV summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        drops: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated subset of ors, noma_full, noma_half.
        #[arg(long, value_delimiter = ',')]
        schemes: Option<Vec<SchemeId>>,
        #[arg(long)]
        csi: Option<CsiMode>,
        #[arg(long)]
        emit_plotdata: Option<PathBuf>,
        /// Directory receiving one iteration trace per block solve.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_ALL_INFEASIBLE: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Command::Run {
        config,
        out,
        drops,
        seed,
        schemes,
        csi,
        emit_plotdata,
        trace,
    } = cli.command;

    let mut cfg = match parse_config(&config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(d) = drops {
        cfg.drops = d;
    }
    if let Some(s) = seed {
        cfg.base_seed = s;
    }
    if let Some(s) = schemes {
        cfg.schemes = s;
    }
    if let Some(c) = csi {
        cfg.csi = c;
    }
    if let Err(e) = cfg.validate() {
        return fail(e);
    }

    let table = match sweep(&cfg) {
        Ok(t) => t,
        Err(e) => return fail(e),
    };
    let mut outputs = vec![write_results(&table, &out)];
    if let Some(p) = emit_plotdata {
        outputs.push(write_plotdata(&table, &p));
    }
    if let Some(dir) = trace {
        outputs.push(write_traces(&table, &dir));
    }
    if let Some(e) = outputs.into_iter().find_map(|r| r.err()) {
        return fail(e);
    }
    if table.all_infeasible() {
        eprintln!("error: every drop was infeasible");
        return ExitCode::from(EXIT_ALL_INFEASIBLE);
    }
    ExitCode::SUCCESS
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config(_) | Error::ConfigLine { .. } => ExitCode::from(EXIT_CONFIG),
        _ => ExitCode::FAILURE,
    }
}
