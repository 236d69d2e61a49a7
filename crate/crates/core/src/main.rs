fn main() {
    std::process::exit(volterra_net::cli::main_with_args(std::env::args().skip(1)));
}
