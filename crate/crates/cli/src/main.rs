fn main() {
    std::process::exit(sitegaze_cli::run(std::env::args_os()));
}
