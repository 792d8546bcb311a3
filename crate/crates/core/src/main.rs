use clap::Parser;

use comve_core::cli::{self, Cli, LOG_ENV};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn"))
        .format_timestamp(None)
        .init();
    std::process::exit(cli::run(Cli::parse()));
}
