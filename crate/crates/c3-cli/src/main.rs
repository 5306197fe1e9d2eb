fn main() {
    std::process::exit(c3_cli::run());
}
