fn main() {
    std::process::exit(hctn::cli::run(std::env::args_os()));
}
