fn main() {
    std::process::exit(zapq::expcli::cli::run(std::env::args_os()));
}
