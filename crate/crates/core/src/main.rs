fn main() {
    std::process::exit(bilevel_meta::cli::run_from_env());
}
