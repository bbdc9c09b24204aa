fn main() {
    std::process::exit(vtrecipe::cli::run_from(std::env::args_os()));
}
