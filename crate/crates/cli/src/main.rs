mod args;
mod commands;

use std::process::ExitCode;

use attnchain::chain::ChainConfig;
use clap::Parser;

use args::{Cli, Command};
use commands::{CliError, Context};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = cli.global;
    let cfg = ChainConfig::new(g.alpha, g.tau, g.max_iters)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = g.threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(t);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    let ctx = Context { global: g, cfg };

    pool.install(|| match &cli.command {
        Command::Validate(a) => commands::validate(&ctx, a),
        Command::Tokenrank(a) => commands::tokenrank(&ctx, a),
        Command::Bounce(a) => commands::bounce(&ctx, a),
        Command::Select(a) => commands::select(&ctx, a),
        Command::Lambda2(a) => commands::lambda2(&ctx, a),
        Command::Segment(a) => commands::segment(&ctx, a),
        Command::MaskOrder(a) => commands::mask_order(&ctx, a),
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::Evaluate(a) => commands::evaluate(&ctx, a),
    })
}
