use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use neurokinect_cli::error::CliError;
use neurokinect_cli::{commands, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.render().to_string();
            eprintln!("{}", CliError::user("Usage", msg.trim()).to_json(None));
            return ExitCode::from(2);
        }
    };
    let mut run_root = None;
    match commands::dispatch(&cli, &mut run_root) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let marker = run_root
                .map(|r: PathBuf| r.join(format!("{}.partial", cli.command.name())))
                .filter(|m| m.exists());
            eprintln!("{}", e.to_json(marker.as_deref()));
            ExitCode::from(e.code as u8)
        }
    }
}
