fn main() {
    std::process::exit(wsml::cli::main_with_args(std::env::args_os()));
}
