fn main() {
    std::process::exit(histostack::cli::dispatch(std::env::args()));
}
