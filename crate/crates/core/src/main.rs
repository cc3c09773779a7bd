fn main() {
    std::process::exit(cgflow::cli::run(std::env::args_os()));
}
