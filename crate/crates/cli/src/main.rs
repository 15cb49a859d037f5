fn main() {
    std::process::exit(epihybrid_cli::run(std::env::args_os()));
}
