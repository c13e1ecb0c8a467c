fn main() {
    std::process::exit(graysim::cli::run(std::env::args_os()));
}
