fn main() {
    std::process::exit(psl_cli::run(std::env::args_os()));
}
