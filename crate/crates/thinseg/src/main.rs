fn main() {
    std::process::exit(thinseg::cli::main());
}
