fn main() {
    std::process::exit(ridge_sfm::cli::run_cli(std::env::args_os()));
}
