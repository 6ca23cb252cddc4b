use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    // TELLER_THREADS caps the worker pool for data-parallel sections
    if let Ok(n) = std::env::var("TELLER_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => log::warn!("ignoring invalid TELLER_THREADS value `{n}`"),
        }
    }

    let cli = teller::cli::Cli::parse();
    ExitCode::from(teller::cli::run(cli))
}
