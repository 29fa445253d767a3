fn main() {
    std::process::exit(contourqa::cli::run(std::env::args_os()));
}
