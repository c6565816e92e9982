fn main() {
    std::process::exit(loggas::cli::main());
}
