fn main() {
    std::process::exit(dinoy::cli_main());
}
