fn main() {
    std::process::exit(metaction::cli::main_with_args(std::env::args_os()));
}
