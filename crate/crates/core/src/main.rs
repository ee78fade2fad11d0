fn main() {
    std::process::exit(dvla::cli::main_with_args(std::env::args_os()));
}
