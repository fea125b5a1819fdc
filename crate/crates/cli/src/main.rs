mod args;
mod commands;
mod config;
mod output;

use std::process::ExitCode;

use clap::Parser;
use layerfuse::Error;

use crate::args::{Cli, Command};

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::TrainingDiverged { .. } => 3,
        e if e.is_numerical() => 4,
        _ => 2,
    }
}

fn configure_threads() {
    let Ok(v) = std::env::var("LAYERFUSE_THREADS") else {
        return;
    };
    match v.trim().parse::<usize>() {
        Ok(0) => {}
        Ok(n) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("cannot configure {n} threads: {e}");
            }
        }
        Err(_) => log::warn!("ignoring LAYERFUSE_THREADS={v:?}"),
    }
}

fn run(cli: &Cli) -> layerfuse::Result<()> {
    std::fs::create_dir_all(&cli.out)?;
    output::write_json(&cli.out.join("resolved-config.json"), &commands::resolved_config(cli))?;
    let (seed, out) = (cli.seed, cli.out.as_path());
    match &cli.command {
        Command::InitTrain(a) => commands::init_train(a, seed, out),
        Command::Capture(a) => commands::capture(a, seed, out),
        Command::Similarity(a) => commands::similarity(a, out),
        Command::Compress(a) => commands::compress(a, seed, out),
        Command::Evaluate(a) => commands::evaluate_cmd(a, seed, out),
        Command::Sweep(a) => commands::sweep(a, seed, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    configure_threads();
    let argv = match config::expand_args(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
