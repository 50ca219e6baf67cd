fn main() {
    std::process::exit(biqt::cli::main_from_args(std::env::args_os()));
}
