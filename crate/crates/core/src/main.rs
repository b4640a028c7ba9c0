fn main() {
    std::process::exit(ssvd::cli::run_cli(std::env::args_os()));
}
