fn main() {
    std::process::exit(grownet::cli::run(std::env::args_os()));
}
