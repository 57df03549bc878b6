fn main() {
    std::process::exit(morphface::cli::run(std::env::args_os()));
}
