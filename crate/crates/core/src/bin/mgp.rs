fn main() {
    std::process::exit(mgp::harness::cli::run(std::env::args_os()));
}
