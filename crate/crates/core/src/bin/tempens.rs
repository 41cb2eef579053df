fn main() {
    std::process::exit(tempens::cli::run_from_args(std::env::args_os()));
}
