fn main() {
    std::process::exit(rwave::cli::run(std::env::args_os()));
}
