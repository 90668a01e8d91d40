fn main() {
    std::process::exit(miipher::cli::run(std::env::args_os()));
}
