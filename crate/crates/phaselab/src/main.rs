fn main() {
    std::process::exit(phaselab::cli::run());
}
