fn main() {
    std::process::exit(quantbench::cli::main_with_args(std::env::args_os()));
}
