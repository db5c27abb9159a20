//! `cortigraph` command-line tool: generate synthetic cohorts, train, evaluate,
//! predict and verify gradients.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use config::{parse_pairs, ConfigError, RunConfig, KEYS};

/// Exit codes.
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_DIVERGENCE: u8 = 4;
pub const EXIT_GRADCHECK: u8 = 5;

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Core(cortigraph::Error),
    Gradcheck(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Core(cortigraph::Error::Io { .. }) => EXIT_IO,
            CliError::Core(cortigraph::Error::Divergence { .. }) => EXIT_DIVERGENCE,
            CliError::Core(_) => EXIT_CONFIG,
            CliError::Gradcheck(_) => EXIT_GRADCHECK,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "config error: {e}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Gradcheck(msg) => write!(f, "gradient check failed: {msg}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<cortigraph::Error> for CliError {
    fn from(e: cortigraph::Error) -> Self {
        CliError::Core(e)
    }
}

fn cli() -> Command {
    let mut cmd = Command::new("cortigraph")
        .version(cortigraph::VERSION)
        .about("Graph classifier for synthetic cortical-thickness connectomes")
        .subcommand_required(true)
        .args_override_self(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("PATH")
                .value_parser(clap::value_parser!(PathBuf))
                .help("key = value config file; flags override its entries"),
        )
        .arg(
            Arg::new("quiet")
                .long("quiet")
                .short('q')
                .global(true)
                .action(ArgAction::SetTrue)
                .help("suppress progress output"),
        );
    for (key, help) in KEYS {
        let mut arg = Arg::new(*key)
            .long(*key)
            .global(true)
            .value_name("VALUE")
            .help(*help);
        if key.contains('_') {
            arg = arg.visible_alias(key.replace('_', "-"));
        }
        cmd = cmd.arg(arg);
    }
    cmd.subcommand(Command::new("gen").about("generate a synthetic dataset into out_dir"))
        .subcommand(Command::new("train").about("train on dataset_dir, writing results to out_dir"))
        .subcommand(Command::new("eval").about("evaluate checkpoint on dataset_dir"))
        .subcommand(Command::new("predict").about("classify one graph file with checkpoint"))
        .subcommand(
            Command::new("gradcheck")
                .about("compare backward gradients with finite differences on a 16-node model")
                .arg(
                    Arg::new("inject-fault")
                        .long("inject-fault")
                        .hide(true)
                        .value_name("SCALE")
                        .value_parser(clap::value_parser!(f64)),
                ),
        )
}

/// Config-file pairs followed by flag pairs, so flags win.
fn resolve(m: &ArgMatches) -> Result<RunConfig, CliError> {
    let mut pairs = Vec::new();
    if let Some(path) = m.get_one::<PathBuf>("config") {
        let text = std::fs::read_to_string(path).map_err(|e| cortigraph::Error::io(path, e))?;
        pairs.extend(parse_pairs(&text)?);
    }
    for (key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            pairs.push((key.to_string(), v.clone()));
        }
    }
    Ok(RunConfig::from_pairs(&pairs)?)
}

fn run(m: &ArgMatches) -> Result<(), CliError> {
    let (name, sub) = m.subcommand().expect("subcommand is required");
    let cfg = resolve(sub)?;
    let quiet = sub.get_flag("quiet");
    match name {
        "gen" => commands::gen(&cfg, quiet),
        "train" => commands::train(&cfg, quiet),
        "eval" => commands::eval(&cfg),
        "predict" => commands::predict(&cfg),
        "gradcheck" => commands::gradcheck(&cfg, sub.get_one::<f64>("inject-fault").copied()),
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cortigraph: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
