//! Thin binary shell: parse arguments, run the selected command, and map
//! failures onto the documented exit codes.

use clap::Parser;
use delayqed::cli;

fn main() {
    let args = cli::Cli::parse();
    if let Err(e) = cli::run(args) {
        eprintln!("error: {e}");
        std::process::exit(cli::exit_code(&e));
    }
}
