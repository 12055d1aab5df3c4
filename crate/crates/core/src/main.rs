fn main() {
    std::process::exit(spherefit::cli::run(std::env::args_os()));
}
