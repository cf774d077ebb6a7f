fn main() {
    std::process::exit(vitconv::harness::cli::run(std::env::args_os()));
}
