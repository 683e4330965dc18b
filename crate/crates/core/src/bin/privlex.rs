fn main() {
    std::process::exit(privlex::cli::main());
}
