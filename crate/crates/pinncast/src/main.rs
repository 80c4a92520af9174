use env_logger::Env;

fn main() {
    env_logger::Builder::from_env(Env::new().filter_or("PINNCAST_LOG", "error")).init();
    std::process::exit(pinncast::cli::run());
}
