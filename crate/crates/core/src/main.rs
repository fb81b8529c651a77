fn main() {
    std::process::exit(yieldbayes::cli::run(std::env::args_os()));
}
