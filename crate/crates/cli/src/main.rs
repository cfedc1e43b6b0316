fn main() {
    std::process::exit(asap3d_cli::main_with_args(std::env::args_os()));
}
