fn main() {
    std::process::exit(medc::cli::run(std::env::args_os(), medc::cli::env_seed()));
}
