fn main() {
    std::process::exit(eqboot::cli::cli_dispatch(std::env::args()));
}
