fn main() {
    adn_count::cli::init_logging();
    std::process::exit(adn_count::cli::main_with_args(std::env::args_os()));
}
