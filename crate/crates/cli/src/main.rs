fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = cerberus_cli::run(std::env::args().collect()) {
        eprintln!("{}", e.to_line());
        std::process::exit(e.exit_code());
    }
}
