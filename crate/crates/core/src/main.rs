fn main() {
    std::process::exit(spikenet::cli::run_from_env());
}
