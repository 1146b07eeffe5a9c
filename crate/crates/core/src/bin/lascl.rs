fn main() {
    std::process::exit(lascl::cli::main_with_args(std::env::args_os()));
}
