fn main() {
    std::process::exit(recon::cli::main_with_args(std::env::args_os()));
}
