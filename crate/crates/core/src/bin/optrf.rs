fn main() {
    std::process::exit(optrf::cli::main_with_args(std::env::args_os()));
}
