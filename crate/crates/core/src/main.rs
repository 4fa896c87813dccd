fn main() {
    std::process::exit(rgmim::cli::run(std::env::args_os()));
}
