use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use ventrigen_core::config::parse_config;
use ventrigen_core::experiment::{dispatch, Subcommand};
use ventrigen_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_MISSING: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

/// Short flags mapped onto config keys.
const ALIASES: [(&str, &str); 7] = [
    ("c", "sample.c"),
    ("guidance", "sample.guidance"),
    ("steps", "sample.steps"),
    ("count", "sample.count"),
    ("seed", "seed"),
    ("out", "out"),
    ("mask-file", "sample.mask_file"),
];

#[derive(Debug, Parser)]
#[command(
    name = "ventrigen",
    version,
    about = "Phantom generation, guided latent diffusion, synthetic corpora and segmentation benchmarks",
    after_help = "Stages: gen-data, train-mask-ae, train-mask-dm, train-image-ae, train-image-dm, sweep, \
synthesize, compose, train-seg, evaluate, report, sample-mask, sample-image.\n\
Any config key can be overridden as --key=value. VENTRIGEN_OUT sets the output directory.\n\
Exit codes: 0 success, 2 config error, 3 missing prerequisite, 4 runtime failure."
)]
struct Cli {
    /// Pipeline stage to run.
    stage: String,
    /// Config file with one `key = value` per line.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides, `--key=value` or `--key value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    overrides: Vec<String>,
}

/// Splits trailing arguments into `(key, value)` overrides, pulling out a
/// late `--config` as well.
fn parse_overrides(args: &[String], config: &mut Option<PathBuf>) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let flag = arg.strip_prefix("--").ok_or_else(|| format!("expected --key=value, got `{arg}`"))?;
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| format!("--{flag} needs a value"))?;
                (flag.to_string(), v.clone())
            }
        };
        if key == "config" {
            *config = Some(PathBuf::from(value));
            continue;
        }
        let key = ALIASES.iter().find(|(a, _)| *a == key).map(|(_, k)| k.to_string()).unwrap_or(key);
        out.push((key, value));
    }
    Ok(out)
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } => EXIT_CONFIG,
        Error::MissingPrerequisite { .. } => EXIT_MISSING,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stage: Subcommand = match cli.stage.parse() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let mut config_path = cli.config;
    let mut overrides = match parse_overrides(&cli.overrides, &mut config_path) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Ok(out) = std::env::var("VENTRIGEN_OUT") {
        if !overrides.iter().any(|(k, _)| k == "out") {
            overrides.insert(0, ("out".into(), out));
        }
    }
    let config = match parse_config(config_path.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match dispatch(stage, &config) {
        Ok(record) => {
            for path in &record.artifacts {
                println!("{}", config.out.join(path).display());
            }
            eprintln!(
                "{stage} done in {:.1}s (config {})",
                (record.finished_ms - record.started_ms) as f64 / 1000.0,
                &record.config_hash[..12]
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{stage} failed: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
