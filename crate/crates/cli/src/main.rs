fn main() {
    std::process::exit(fullinfo_cli::main_with_args(std::env::args_os()));
}
