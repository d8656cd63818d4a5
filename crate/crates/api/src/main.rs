// SPDX-License-Identifier: Apache-2.0

use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = qslice_api::cli::Cli::parse();
    if let Err(e) = qslice_api::cli::run(cli, &mut std::io::stdout()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
