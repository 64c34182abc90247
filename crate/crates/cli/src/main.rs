fn main() {
    std::process::exit(unvp_cli::run(std::env::args_os()));
}
