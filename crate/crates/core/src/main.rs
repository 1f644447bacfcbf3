fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter(uniow::cli::LOG_ENV)).init();
    std::process::exit(uniow::cli::main_with_args(std::env::args_os()));
}
