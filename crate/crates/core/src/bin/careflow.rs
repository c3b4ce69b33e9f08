fn main() {
    std::process::exit(careflow::cli::run(std::env::args_os()));
}
