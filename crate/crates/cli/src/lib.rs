//! Command-line layer: configuration files, run directories and the six
//! experiment commands.

pub mod commands;
pub mod config;
pub mod plot;

use std::path::PathBuf;

use mlsc_core::Error;

use crate::config::{ExperimentConfig, OUTPUT_ROOT_ENV};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const USAGE: &str = "usage: mlsc <train|eval|sweep|matrix|ablate|baseline> [config.toml] [--key=value ...]";

/// Parsed command line.
#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub command: String,
    pub config: Option<PathBuf>,
    pub flags: Vec<(String, String)>,
}

pub fn parse_args(args: &[String]) -> Result<Invocation, String> {
    let mut it = args.iter();
    let command = it.next().ok_or_else(|| USAGE.to_string())?.clone();
    if !commands::COMMANDS.contains(&command.as_str()) {
        return Err(format!("unknown command {command:?}\n{USAGE}"));
    }
    let mut config = None;
    let mut flags = Vec::new();
    for a in it {
        if let Some(kv) = a.strip_prefix("--") {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| format!("flag {a:?} must be written --key=value"))?;
            if k == "config" {
                config = Some(PathBuf::from(v));
            } else {
                flags.push((k.replace('-', "_"), v.to_string()));
            }
        } else if config.is_none() {
            config = Some(PathBuf::from(a));
        } else {
            return Err(format!("unexpected argument {a:?}\n{USAGE}"));
        }
    }
    Ok(Invocation { command, config, flags })
}

fn is_usage_error(e: &Error, inv: &Invocation) -> bool {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::ConfigMismatch(_) => true,
        Error::Io { path, .. } => inv.config.as_deref() == Some(path.as_path()),
        _ => false,
    }
}

/// Runs the CLI and returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    let inv = match parse_args(args) {
        Ok(i) => i,
        Err(msg) => {
            eprintln!("error: {msg}");
            return EXIT_USAGE;
        }
    };
    let env_root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
    let cfg = match ExperimentConfig::from_sources(inv.config.as_deref(), &inv.flags, env_root) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return if is_usage_error(&e, &inv) { EXIT_USAGE } else { EXIT_RUNTIME };
        }
    };
    match commands::dispatch(&inv.command, &cfg) {
        Ok(p) => {
            println!("{}", p.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            if is_usage_error(&e, &inv) {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}
