fn main() {
    std::process::exit(hidden_fold::cli::main_with_args(std::env::args_os()));
}
