use std::path::PathBuf;
use std::process::ExitCode;

use twophase_cli::{run, RunConfig};

const USAGE: &str = "\
twophase - hp-adaptive DG solver for two-phase flow in porous media

USAGE:
    twophase [--config PATH] [--override KEY=VALUE]... [--output DIR]
             [--threads N] [--quiet]

OPTIONS:
    --config PATH        key=value run configuration (defaults: lens benchmark)
    --override KEY=VALUE apply one config entry on top of the file (repeatable)
    --output DIR         write VTK snapshots, line CSVs, diagnostics.csv, summary.txt
    --threads N          worker threads for assembly (default 1)
    --quiet              suppress progress output
";

fn parse_args() -> Result<RunConfig, String> {
    let mut args = std::env::args().skip(1);
    let mut config_path: Option<PathBuf> = None;
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut output: Option<PathBuf> = None;
    let mut threads: Option<usize> = None;
    let mut quiet = false;

    while let Some(arg) = args.next() {
        match arg.as_str() {
            "--config" => {
                config_path = Some(PathBuf::from(
                    args.next().ok_or("--config needs a path")?,
                ));
            }
            "--override" => {
                let kv = args.next().ok_or("--override needs KEY=VALUE")?;
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| format!("bad override '{kv}', expected KEY=VALUE"))?;
                overrides.push((k.trim().into(), v.trim().into()));
            }
            "--output" => {
                output = Some(PathBuf::from(args.next().ok_or("--output needs a dir")?));
            }
            "--threads" => {
                threads = Some(
                    args.next()
                        .ok_or("--threads needs a count")?
                        .parse()
                        .map_err(|_| "invalid thread count")?,
                );
            }
            "--quiet" => quiet = true,
            "--help" | "-h" => {
                print!("{USAGE}");
                std::process::exit(0);
            }
            other => return Err(format!("unknown argument '{other}'\n\n{USAGE}")),
        }
    }

    let mut config = match config_path {
        Some(path) => RunConfig::from_file(&path).map_err(|e| e.to_string())?,
        None => RunConfig::default(),
    };
    for (k, v) in overrides {
        config.set(&k, &v).map_err(|e| e.to_string())?;
    }
    if let Some(dir) = output {
        config.output_dir = Some(dir);
    }
    if let Some(n) = threads {
        config.threads = n;
    }
    if quiet {
        config.quiet = true;
    }
    Ok(config)
}

fn main() -> ExitCode {
    let config = match parse_args() {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("{msg}");
            return ExitCode::from(2);
        }
    };
    match run(&config) {
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Ok(result) => {
            if let Some(f) = &result.failure {
                eprintln!(
                    "step failure: scheme {} at t = {}: {}",
                    f.scheme, f.t, f.reason
                );
                ExitCode::FAILURE
            } else {
                if !config.quiet {
                    let last = result.records.last().unwrap();
                    eprintln!(
                        "completed: t = {}, elements = {}, dofs = {}",
                        last.t, last.elements, last.dofs
                    );
                }
                ExitCode::SUCCESS
            }
        }
    }
}
