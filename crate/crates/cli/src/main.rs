fn main() {
    std::process::exit(reschroma_cli::main_with_args(std::env::args_os()));
}
