fn main() {
    std::process::exit(dcbank::cli::main());
}
