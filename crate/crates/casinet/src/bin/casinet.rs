//! Command-line entry point.
//!
//! Usage: `casinet <command> [--config <file>] [--<key> <value>]...`
//!
//! Commands: gen-data, train, eval, ablate, dump-attention, gradcheck.
//! Any configuration key can be overridden on the command line; the file,
//! when given, is applied first. Exit codes: 0 success, 1 usage error,
//! 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use casinet::commands;
use casinet::error::Error;
use casinet::runconfig::RunConfig;

fn usage() -> String {
    "usage: casinet <gen-data|train|eval|ablate|dump-attention|gradcheck> \
     [--config <file>] [--<key> <value>]...\n\
     run `casinet keys` to list the configuration keys"
        .to_string()
}

fn known_keys() -> String {
    let cfg = RunConfig::default();
    let mut out = String::from("configuration keys and their defaults:\n");
    out.push_str(&cfg.resolved_text());
    out.push_str("out=<dir>\ndata_dir=<dir>\ncheckpoint=<dir>\nimage=<file.ppm>\n");
    out
}

struct Cli {
    command: String,
    config: Option<PathBuf>,
    overrides: Vec<(String, String)>,
}

fn parse_args(args: &[String]) -> Result<Cli, String> {
    if args.is_empty() {
        return Err(usage());
    }
    let command = args[0].clone();
    let mut config = None;
    let mut overrides = Vec::new();
    let mut i = 1;
    while i < args.len() {
        let flag = &args[i];
        let Some(key) = flag.strip_prefix("--") else {
            return Err(format!("expected --key, found {flag:?}\n{}", usage()));
        };
        let Some(value) = args.get(i + 1) else {
            return Err(format!("missing value for --{key}"));
        };
        if key == "config" {
            config = Some(PathBuf::from(value));
        } else {
            overrides.push((key.to_string(), value.clone()));
        }
        i += 2;
    }
    Ok(Cli { command, config, overrides })
}

fn run(cli: &Cli) -> casinet::Result<()> {
    let cfg = RunConfig::from_sources(cli.config.as_deref(), &cli.overrides)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command.as_str() {
        "gen-data" => {
            commands::cmd_gen_data(&cfg)?;
            eprintln!(
                "dataset of {} samples written to {}",
                cfg.train_count + cfg.val_count,
                cfg.data_dir.as_ref().expect("checked").display()
            );
        }
        "train" => {
            let result = commands::cmd_train(&cfg)?;
            eprintln!(
                "trained {} iterations; final loss {:.4}, val mIoU {:.4}",
                cfg.optim.total_iters, result.final_loss, result.final_metrics.miou
            );
        }
        "eval" => {
            let metrics = commands::cmd_eval(&cfg)?;
            eprintln!("val mIoU {:.4}, pixel acc {:.4}", metrics.miou, metrics.pixel_acc);
        }
        "ablate" => {
            let rows = commands::cmd_ablate(&cfg)?;
            for (name, miou) in rows {
                eprintln!("{name}: mIoU {miou:.4}");
            }
        }
        "dump-attention" => {
            let (n_att, n_aff) = commands::cmd_dump_attention(&cfg)?;
            eprintln!("wrote {n_att} attention rasters and {n_aff} affinity rasters");
        }
        "gradcheck" => {
            let report = commands::cmd_gradcheck(&cfg)?;
            eprintln!(
                "gradient check passed: max rel err {:.3e} over {} coordinates",
                report.max_rel_err(),
                report.entries.len()
            );
        }
        other => {
            return Err(Error::Config(format!("unknown command {other:?}\n{}", usage())));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.first().map(String::as_str) == Some("keys") {
        print!("{}", known_keys());
        return ExitCode::SUCCESS;
    }
    let cli = match parse_args(&args) {
        Ok(cli) => cli,
        Err(msg) => {
            eprintln!("{msg}");
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
