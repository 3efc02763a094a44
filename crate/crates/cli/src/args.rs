use std::path::PathBuf;

use clap::{Arg, ArgMatches, Command};
use hierseg::config::{RunConfig, KEYS};

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

/// One `--<key>` option per configuration key, documented with its default.
fn with_keys(mut cmd: Command) -> Command {
    let defaults = RunConfig::default();
    cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .value_parser(clap::value_parser!(PathBuf))
            .help("`key = value` config file; flags override it"),
    );
    for k in KEYS {
        cmd = cmd.arg(
            Arg::new(k.name)
                .long(flag(k.name))
                .value_name("VALUE")
                .help(format!("{} [default: {}]", k.doc, k.value(&defaults)))
                .help_heading("Configuration"),
        );
    }
    cmd
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).value_name("PATH").value_parser(clap::value_parser!(PathBuf)).help(help)
}

pub fn command() -> Command {
    Command::new("hierseg")
        .about("Nested-region tumor segmentation on synthetic phantoms")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_keys(
            Command::new("gen")
                .about("Write phantom volume/label pairs and a manifest")
                .arg(path_arg("out", "output directory").required(true)),
        ))
        .subcommand(with_keys(
            Command::new("train")
                .about("Train a network; writes checkpoints, loss.csv and run_config.txt")
                .arg(path_arg("manifest", "training manifest").default_value("data/manifest.tsv"))
                .arg(path_arg("out", "output directory").default_value("run"))
                .arg(path_arg("resume", "continue from this checkpoint"))
                .arg(
                    Arg::new("log-every")
                        .long("log-every")
                        .value_name("N")
                        .value_parser(clap::value_parser!(u64))
                        .default_value("100")
                        .help("print the running loss every N iterations (0: never)"),
                ),
        ))
        .subcommand(with_keys(
            Command::new("eval")
                .about("Score a checkpoint on a manifest; prints or writes the region table")
                .arg(path_arg("checkpoint", "checkpoint file").required(true))
                .arg(path_arg("manifest", "evaluation manifest").required(true))
                .arg(path_arg("out", "CSV output file (default: stdout)")),
        ))
        .subcommand(with_keys(
            Command::new("report")
                .about("Render a loss curve (PGM) and truth/prediction comparisons (PPM)")
                .arg(path_arg("out", "output directory").required(true))
                .arg(path_arg("loss-csv", "loss history to plot"))
                .arg(path_arg("checkpoint", "checkpoint whose predictions to render"))
                .arg(path_arg("manifest", "cases to render"))
                .arg(
                    Arg::new("cases")
                        .long("cases")
                        .value_name("N")
                        .value_parser(clap::value_parser!(usize))
                        .default_value("4")
                        .help("maximum number of cases to render"),
                ),
        ))
        .version(env!("CARGO_PKG_VERSION"))
}

/// Config keys given as flags, in table order.
pub fn overrides(m: &ArgMatches) -> Vec<(String, String)> {
    KEYS.iter()
        .filter_map(|k| m.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone())))
        .collect()
}

pub fn path(m: &ArgMatches, name: &str) -> Option<PathBuf> {
    m.get_one::<PathBuf>(name).cloned()
}
