fn main() {
    env_logger::init();
    std::process::exit(stvm::cli::main());
}
