fn main() {
    std::process::exit(wibmark::cli::run(std::env::args_os()));
}
