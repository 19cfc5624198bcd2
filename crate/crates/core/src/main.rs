fn main() {
    std::process::exit(xmodal::cli::main_with_args(std::env::args_os()));
}
