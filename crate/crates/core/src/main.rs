fn main() {
    uncmap::cli::configure_threads();
    std::process::exit(uncmap::cli::run(std::env::args_os()));
}
