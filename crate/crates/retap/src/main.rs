use std::process::ExitCode;

use clap::Parser;
use retap::cli::{Cli, Command};
use retap::{commands, Workspace};

fn run(cli: Cli) -> anyhow::Result<commands::Outcome> {
    let cfg = cli.opts.resolve()?;
    if let Command::Config = cli.command {
        cfg.validate()?;
        print!("{}", cfg.to_toml());
        return Ok(commands::Outcome { errors: 0, summary: String::new() });
    }
    let ws = Workspace::new(cfg)?;
    match cli.command {
        Command::Embed => commands::embed(&ws),
        Command::Index { merge } => commands::index(&ws, &merge),
        Command::Search => commands::search(&ws),
        Command::Rerank => commands::rerank(&ws),
        Command::Eval => commands::eval(&ws),
        Command::Probe { kind } => commands::probe(&ws, kind),
        Command::Rag => commands::rag(&ws),
        Command::Config => unreachable!(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(outcome) => {
            if !outcome.summary.is_empty() {
                println!("{}", outcome.summary);
            }
            if outcome.errors > 0 {
                eprintln!("{} error record(s); see the output artifact", outcome.errors);
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
