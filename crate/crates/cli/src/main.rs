use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let app = cscl_cli::app();
    let matches = app.get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let cmd = cscl_cli::Command::from_name(name).expect("registered subcommand");
    let result = cscl_cli::config_from_matches(sub).and_then(|cfg| {
        let out = std::path::PathBuf::from(sub.get_one::<String>("out").expect("required"));
        cscl_cli::run(cmd, &cfg, &out, sub.get_flag("force"))
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
