fn main() {
    std::process::exit(ca_core::cli::dispatch(std::env::args()));
}
