//! Command-line driver: simulate, preprocess, train, predict, evaluate,
//! cluster. Every command takes `--config <file>` plus repeatable
//! `--set section.key=value` overrides; outputs land in `--out <dir>`
//! together with an echo of the fully resolved configuration.
//!
//! Exit codes: 0 success, 1 runtime/numerical failure, 2 usage or
//! configuration failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use commands::{CliError, CmdResult};
use config::RunConfig;
use neural_ekf::predict::PredictMode;

const USAGE: &str = "\
neural-ekf — learnable extended Kalman filtering toolkit

USAGE:
    neural-ekf <command> [options]

COMMANDS:
    simulate    generate synthetic oscillator data
                --config <file> [--set s.k=v]... --out <dir>
    preprocess  resample / filter / standardize / window a dataset
                --config <file> [--set s.k=v]... --data <path> --out <dir>
    train       fit a model to a dataset
                --config <file> [--set s.k=v]... --data <path> --out <dir>
    predict     run a trained model over a dataset
                --checkpoint <file> --data <path> --out <dir>
                [--mode rollout|filtered|smoothed]
    evaluate    per-case, per-channel RMSE of predictions
                --predictions <dir> --data <path> --out <dir>
    cluster     PCA + k-means anomaly report over RMSE tables
                [--config <file>] [--set s.k=v]... --rmse <file>[,<file>...]
                --out <dir>

The environment variable NEURAL_EKF_THREADS caps worker threads
(default: machine cores).
";

struct Args {
    config: Option<PathBuf>,
    sets: Vec<String>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    predictions: Option<PathBuf>,
    rmse: Vec<PathBuf>,
    mode: String,
}

fn parse_args(mut argv: std::env::Args) -> Result<(String, Args), String> {
    let _bin = argv.next();
    let Some(command) = argv.next() else {
        return Err("missing command".into());
    };
    let mut args = Args {
        config: None,
        sets: Vec::new(),
        data: None,
        out: None,
        checkpoint: None,
        predictions: None,
        rmse: Vec::new(),
        mode: "rollout".into(),
    };
    while let Some(flag) = argv.next() {
        let mut value_of = |flag: &str| {
            argv.next().ok_or_else(|| format!("{flag} expects a value"))
        };
        match flag.as_str() {
            "--config" => args.config = Some(PathBuf::from(value_of("--config")?)),
            "--set" => args.sets.push(value_of("--set")?),
            "--data" => args.data = Some(PathBuf::from(value_of("--data")?)),
            "--out" => args.out = Some(PathBuf::from(value_of("--out")?)),
            "--checkpoint" => args.checkpoint = Some(PathBuf::from(value_of("--checkpoint")?)),
            "--predictions" => args.predictions = Some(PathBuf::from(value_of("--predictions")?)),
            "--rmse" => {
                args.rmse
                    .extend(value_of("--rmse")?.split(',').map(PathBuf::from));
            }
            "--mode" => args.mode = value_of("--mode")?,
            other => return Err(format!("unknown option {other}")),
        }
    }
    Ok((command, args))
}

fn resolved_config(args: &Args) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::with_defaults(),
    };
    for spec in &args.sets {
        cfg.set_dotted(spec)?;
    }
    Ok(cfg)
}

fn require<T: Clone>(value: &Option<T>, flag: &str) -> Result<T, CliError> {
    value
        .clone()
        .ok_or_else(|| CliError::Usage(format!("{flag} is required for this command")))
}

fn dispatch(command: &str, args: &Args) -> CmdResult {
    match command {
        "simulate" => {
            let cfg = resolved_config(args)?;
            commands::cmd_simulate(&cfg, &require(&args.out, "--out")?)
        }
        "preprocess" => {
            let cfg = resolved_config(args)?;
            commands::cmd_preprocess(
                &cfg,
                &require(&args.data, "--data")?,
                &require(&args.out, "--out")?,
            )
        }
        "train" => {
            let cfg = resolved_config(args)?;
            commands::cmd_train(
                &cfg,
                &require(&args.data, "--data")?,
                &require(&args.out, "--out")?,
            )
        }
        "predict" => {
            let mode = PredictMode::parse(&args.mode).ok_or_else(|| {
                CliError::Usage(format!(
                    "--mode must be rollout, filtered, or smoothed; got {:?}",
                    args.mode
                ))
            })?;
            commands::cmd_predict(
                &require(&args.checkpoint, "--checkpoint")?,
                &require(&args.data, "--data")?,
                mode,
                &require(&args.out, "--out")?,
            )
        }
        "evaluate" => commands::cmd_evaluate(
            &require(&args.predictions, "--predictions")?,
            &require(&args.data, "--data")?,
            &require(&args.out, "--out")?,
        ),
        "cluster" => {
            let cfg = resolved_config(args)?;
            if args.rmse.is_empty() {
                return Err(CliError::Usage("--rmse is required for this command".into()));
            }
            commands::cmd_cluster(&cfg, &args.rmse, &require(&args.out, "--out")?)
        }
        other => Err(CliError::Usage(format!("unknown command {other:?}"))),
    }
}

fn main() -> ExitCode {
    let (command, args) = match parse_args(std::env::args()) {
        Ok(parsed) => parsed,
        Err(message) => {
            eprintln!("error: {message}\n\n{USAGE}");
            return ExitCode::from(2);
        }
    };
    if command == "help" || command == "--help" || command == "-h" {
        println!("{USAGE}");
        return ExitCode::SUCCESS;
    }
    match dispatch(&command, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(message)) => {
            eprintln!("error: {message}\n\n{USAGE}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}
