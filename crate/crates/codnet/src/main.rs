fn main() {
    std::process::exit(codnet::cli::run(std::env::args_os()));
}
