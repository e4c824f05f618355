fn main() {
    std::process::exit(fairreg_cli::run(std::env::args_os()));
}
