fn main() {
    std::process::exit(gs3::cli::run(std::env::args_os()));
}
