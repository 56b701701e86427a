fn main() {
    std::process::exit(l2m::harness::cli::run(std::env::args_os()));
}
