fn main() {
    std::process::exit(piaa::cli::run(std::env::args_os()));
}
