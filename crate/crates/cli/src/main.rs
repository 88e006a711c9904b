use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("MVS_LOG", "info")).init();
    let cli = mvs_cli::Cli::parse();
    if let Err(e) = mvs_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
