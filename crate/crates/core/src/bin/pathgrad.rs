fn main() {
    std::process::exit(pathgrad::cli::run());
}
