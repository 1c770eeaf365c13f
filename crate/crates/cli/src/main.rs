use std::process::ExitCode;

use clap::Parser;
use revoicer::commands::{error_json, execute, init_threads, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.render().to_string();
            let v = serde_json::json!({ "error": { "kind": "usage", "message": msg.trim() } });
            eprintln!("{v}");
            return ExitCode::from(2);
        }
    };
    let result = init_threads().and_then(|_| execute(cli.command));
    match result {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
