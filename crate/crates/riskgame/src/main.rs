fn main() {
    std::process::exit(riskgame::cli::run_from_args());
}
