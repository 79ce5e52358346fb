fn main() {
    std::process::exit(vitprune_cli::run(std::env::args_os()));
}
