fn main() {
    std::process::exit(svolterra::cli::main_with_args(std::env::args_os()));
}
