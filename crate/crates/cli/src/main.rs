fn main() {
    std::process::exit(fbsde_cli::run(std::env::args_os()));
}
