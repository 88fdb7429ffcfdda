use clap::Parser;
use mfql_cli::{execute, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = execute(&cli) {
        eprintln!("mfql: {e}");
        std::process::exit(e.exit_code());
    }
}
