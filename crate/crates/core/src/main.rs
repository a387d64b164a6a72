fn main() {
    std::process::exit(editlm::cli::main());
}
