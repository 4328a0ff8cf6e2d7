use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TBM_LOG", "info")).init();
    let cli = tbm_core::cli::Cli::parse();
    if let Err(e) = tbm_core::cli::run(cli) {
        log::error!("{e}");
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
