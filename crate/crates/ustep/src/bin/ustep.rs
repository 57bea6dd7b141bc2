fn main() {
    std::process::exit(ustep::cli::main_with_args(std::env::args_os()));
}
