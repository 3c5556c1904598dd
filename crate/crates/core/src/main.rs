fn main() {
    std::process::exit(serlu::cli::run(std::env::args_os()));
}
