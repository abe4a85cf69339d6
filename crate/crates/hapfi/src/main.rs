fn main() {
    std::process::exit(hapfi::cli::run(std::env::args_os()));
}
