fn main() {
    std::process::exit(unp::cli::main_with_args(std::env::args_os()));
}
