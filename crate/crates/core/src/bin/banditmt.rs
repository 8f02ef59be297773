fn main() {
    std::process::exit(banditmt::cli::main());
}
