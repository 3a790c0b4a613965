fn main() {
    std::process::exit(semidet_cli::run(std::env::args_os()));
}
