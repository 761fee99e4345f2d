fn main() {
    std::process::exit(kslb::cli::main_with_args(std::env::args_os()));
}
