fn main() {
    std::process::exit(ecatch::cli::run(std::env::args_os()));
}
