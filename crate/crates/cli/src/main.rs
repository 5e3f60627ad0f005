mod analyze;
mod dataset;
mod ingest;
mod mixed;
mod oracle;
mod report;
mod store;
mod verify;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "lsmgraph", version, about = "Ingestion, analysis and verification harness for the lsmgraph store")]
struct Cli {
    #[command(flatten)]
    store: store::StoreArgs,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load a dataset: the warm-up fraction untimed, the rest timed.
    Ingest(ingest::IngestArgs),
    /// Run one algorithm on a pinned snapshot and report runtime and I/O.
    Analyze(analyze::AnalyzeArgs),
    /// Ingest the tail of a dataset while readers loop SSSP.
    Mixed(mixed::MixedArgs),
    /// Replay a random workload into the store and an in-memory oracle and compare.
    Verify(verify::VerifyArgs),
    /// Print level layout and counters of an existing store.
    Stats,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Ingest(a) => ingest::run(&cli.store, &a),
        Command::Analyze(a) => analyze::run(&cli.store, &a),
        Command::Mixed(a) => mixed::run(&cli.store, &a),
        Command::Verify(a) => verify::run(&cli.store, &a),
        Command::Stats => store::stats(&cli.store),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
