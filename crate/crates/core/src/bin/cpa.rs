fn main() {
    std::process::exit(cpa_enhancer::cli::run(std::env::args_os()));
}
