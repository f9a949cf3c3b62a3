fn main() {
    std::process::exit(strgode::cli::main_with(std::env::args_os()));
}
