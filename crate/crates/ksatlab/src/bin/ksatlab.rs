fn main() {
    std::process::exit(ksatlab::cli::main_with(std::env::args_os()));
}
