fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(pnmsim_cli::LOG_ENV, "warn")).init();
    std::process::exit(pnmsim_cli::run(std::env::args_os()));
}
