fn main() {
    std::process::exit(farnet::cli::run(std::env::args_os()));
}
