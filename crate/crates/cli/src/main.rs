fn main() {
    std::process::exit(wskd_cli::run(std::env::args_os()));
}
