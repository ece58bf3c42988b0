fn main() {
    std::process::exit(kowcpi::cli::run(std::env::args_os()));
}
