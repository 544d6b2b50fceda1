use std::process::ExitCode;

use clap::Parser;
use ctxreport_cli::cli::{Cli, Command};
use ctxreport_cli::CHECKPOINT_DIR;
use ctxreport_core::Result;

fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.resolve()?;
    match &cli.command {
        Command::SynthData => {
            let manifest = ctxreport_cli::synth_data(&cfg)?;
            println!("{}", manifest.display());
        }
        Command::Train => {
            let out = ctxreport_cli::train(&cfg)?;
            if let Some(last) = out.curve.epochs.last() {
                println!("final loss {last:.6}");
            }
            println!("{}", out.checkpoint.display());
        }
        Command::Generate { checkpoint } => {
            let ckpt = checkpoint
                .clone()
                .unwrap_or_else(|| cfg.output_dir.join(CHECKPOINT_DIR));
            let reports = ctxreport_cli::generate(&cfg, &ckpt)?;
            println!("generated {} reports", reports.len());
        }
        Command::Evaluate {
            results,
            hypotheses,
            references,
        } => {
            let report = match (results, hypotheses, references) {
                (Some(r), _, _) => ctxreport_cli::evaluate_results(&cfg, r)?,
                (None, Some(h), Some(r)) => ctxreport_cli::evaluate_tsv(&cfg, h, r)?,
                _ => ctxreport_cli::evaluate_results(
                    &cfg,
                    &cfg.output_dir.join(ctxreport_cli::RESULTS_FILE),
                )?,
            };
            print!("{}", report.table());
        }
        Command::Bench => {
            let (_, table) = ctxreport_cli::bench(&cfg)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
