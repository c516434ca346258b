fn main() {
    std::process::exit(wsr_cli::run(std::env::args_os()));
}
