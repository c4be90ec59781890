fn main() {
    std::process::exit(lanefuse::cli::run(std::env::args_os()));
}
