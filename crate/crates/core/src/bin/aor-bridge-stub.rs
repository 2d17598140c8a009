//! Bridge server backed by the built-in simulator. Speaks the bridge protocol
//! on stdin/stdout, for protocol tests and `--sim bridge:` smoke runs.

use std::io::{self, BufReader};
use std::process::ExitCode;

use aor::orchestrator::stub::{serve_stub, StubOptions};
use clap::Parser;

#[derive(Parser)]
#[command(version, about = "Serve the built-in simulator over the bridge protocol")]
struct Args {
    /// Answer the step with this index in each episode with an error.
    #[arg(long)]
    fail_at_step: Option<u32>,
    /// Answer every reset with an error.
    #[arg(long)]
    fail_on_reset: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let opts = StubOptions {
        fail_at_step: args.fail_at_step,
        fail_on_reset: args.fail_on_reset,
    };
    match serve_stub(BufReader::new(io::stdin().lock()), io::stdout().lock(), opts) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("aor-bridge-stub: {e}");
            ExitCode::FAILURE
        }
    }
}
