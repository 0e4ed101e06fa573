fn main() {
    std::process::exit(noesis::cli::main_with_args(std::env::args_os()));
}
