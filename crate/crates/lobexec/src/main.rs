fn main() {
    std::process::exit(lobexec::cli::run());
}
