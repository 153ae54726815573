fn main() {
    std::process::exit(cqnet_cli::main_with_args(std::env::args_os()));
}
