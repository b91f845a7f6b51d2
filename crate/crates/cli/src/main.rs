fn main() {
    std::process::exit(rawnet2_cli::main_with_args(std::env::args_os()));
}
