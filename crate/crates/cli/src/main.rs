fn main() {
    std::process::exit(tlda_cli::run(std::env::args_os()));
}
