fn main() {
    std::process::exit(a2bis::cli::run(std::env::args_os()));
}
