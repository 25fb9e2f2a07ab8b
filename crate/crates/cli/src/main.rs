use std::io::Write;
use std::process::ExitCode;

use clap::Parser;

use dac_cli::{exit_code, init_logging, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(&cli.log_level);
    let mut out = String::new();
    let result = run(&cli, &mut out);
    print!("{out}");
    let _ = std::io::stdout().flush();
    match result {
        Ok(status) => ExitCode::from(status),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
