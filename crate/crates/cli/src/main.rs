fn main() {
    std::process::exit(metadomain_cli::run(std::env::args_os()));
}
