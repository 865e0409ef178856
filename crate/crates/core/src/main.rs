fn main() {
    std::process::exit(litestage::cli::run(std::env::args_os()));
}
