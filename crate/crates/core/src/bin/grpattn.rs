use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command as Cli};
use grpattn::cli::{run, Command, RunConfig, KEYS};

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

fn subcommand(cmd: Command) -> Cli {
    let keys = cmd.keys();
    let args = KEYS
        .iter()
        .filter(|(k, _)| keys.contains(k))
        .map(|&(k, help)| Arg::new(k).long(flag(k)).value_name("VALUE").help(help));
    Cli::new(cmd.name()).about(cmd.about()).args(args)
}

fn cli() -> Cli {
    Cli::new("grpattn")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Group attention timeseries encoder: data, training, benchmarks, batch planning")
        .subcommand_required(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .help("Flat key = value settings file; flags override it"),
        )
        .arg(
            Arg::new("out")
                .long("out")
                .global(true)
                .value_name("DIR")
                .default_value("out")
                .help("Output directory"),
        )
        .subcommands(Command::ALL.map(subcommand))
}

fn flags(cmd: Command, m: &ArgMatches) -> BTreeMap<String, String> {
    cmd.keys()
        .iter()
        .filter_map(|&k| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // `grpattn run <command>` and `grpattn <command>` are the same.
    let args: Vec<String> = std::env::args()
        .enumerate()
        .filter(|(i, a)| !(*i == 1 && a == "run"))
        .map(|(_, a)| a)
        .collect();
    let matches = cli().get_matches_from(args);
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let cmd: Command = name.parse().expect("clap only accepts known commands");
    let out = PathBuf::from(sub.get_one::<String>("out").expect("has default"));
    let config = sub.get_one::<String>("config").map(PathBuf::from);
    let result = RunConfig::resolve(cmd, out, config.as_deref(), std::env::var("GA_SEED").ok(), flags(cmd, sub))
        .and_then(|rc| run(&rc));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
