fn main() {
    std::process::exit(collapse_lab::harness::cli::main_with_args(std::env::args_os()));
}
