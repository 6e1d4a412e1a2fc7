fn main() {
    std::process::exit(mlae_cli::run(std::env::args_os()));
}
