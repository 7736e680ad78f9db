fn main() {
    std::process::exit(structflow::cli::run(std::env::args_os()));
}
