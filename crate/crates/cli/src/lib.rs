//! Reproducible CSCL experiment workflows behind the `cscl` binary.

pub mod commands;
pub mod config;

use anyhow::Result;
use clap::{Arg, ArgAction, ArgMatches, Command as App};

pub use commands::{run, Command};
pub use config::{RunConfig, KEYS};

fn key_args() -> Vec<Arg> {
    KEYS.iter()
        .map(|k| {
            let long = k.name.replace('_', "-");
            let mut arg = Arg::new(k.name)
                .long(long.clone())
                .value_name("VALUE")
                .help(format!("{} [default: {}]", k.help, k.default));
            if long != k.name {
                arg = arg.alias(k.name);
            }
            if config::is_bool_key(k.name) {
                arg = arg.num_args(0..=1).default_missing_value("true");
            }
            arg
        })
        .collect()
}

pub fn app() -> App {
    let common = [
        Arg::new("config").long("config").value_name("PATH").help("key=value configuration file"),
        Arg::new("out").long("out").value_name("DIR").help("output directory").required(true),
        Arg::new("force")
            .long("force")
            .action(ArgAction::SetTrue)
            .help("write into an existing output directory"),
    ];
    let mut app = App::new("cscl")
        .about("Context-self contrastive pre-training on synthetic parcel scenes")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (_, name, about) in Command::ALL {
        app = app.subcommand(App::new(name).about(about).args(common.clone()).args(key_args()));
    }
    app
}

/// Defaults, then the `--config` file, then flags; resolved and validated.
pub fn config_from_matches(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = m.get_one::<String>("config") {
        cfg.merge_file(path.as_ref())?;
    }
    for k in KEYS {
        if let Some(v) = m.get_one::<String>(k.name) {
            cfg.set(k.name, v)?;
        }
    }
    cfg.resolve()
}
