fn main() {
    std::process::exit(cofsep::cli::run(std::env::args_os()));
}
