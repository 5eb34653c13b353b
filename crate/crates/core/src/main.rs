fn main() {
    std::process::exit(ssn_core::cli::run(std::env::args_os()));
}
