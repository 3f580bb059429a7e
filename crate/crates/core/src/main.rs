fn main() {
    std::process::exit(sgd_stability::cli::run(std::env::args_os()));
}
