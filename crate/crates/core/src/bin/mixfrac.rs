fn main() {
    std::process::exit(mixfrac::cli::run(std::env::args_os()));
}
