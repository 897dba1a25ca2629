fn main() {
    std::process::exit(morseuq_cli::run(std::env::args_os()));
}
