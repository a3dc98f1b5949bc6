fn main() {
    std::process::exit(lesionseg_cli::run(std::env::args_os()));
}
