fn main() {
    std::process::exit(upplda::cli::run(std::env::args_os()));
}
