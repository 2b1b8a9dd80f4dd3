fn main() {
    std::process::exit(ensd::cli::main_with_args(std::env::args_os()));
}
