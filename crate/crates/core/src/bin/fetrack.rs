fn main() {
    std::process::exit(fetrack::cli::run(std::env::args_os()));
}
